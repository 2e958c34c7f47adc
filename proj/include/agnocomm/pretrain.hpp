#pragma once

// Reward-free data collection and self-supervised pre-training of the set
// autoencoder.

#include <agnocomm/set_autoencoder.hpp>
#include <agnocomm/world.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace agnocomm::pretrain {

using pisa::ObservationSet;

enum class Provenance { random_policy, random_observation_sampling };

std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view s);

struct PretrainDataset {
  std::vector<ObservationSet> samples;  // each a full joint observation
  Provenance provenance = Provenance::random_observation_sampling;
  std::size_t min_cardinality = 0;
  std::size_t max_cardinality = 0;
};

// Exposes an environment's observations and episode boundaries, nothing else.
// Collectors only ever see this view, so rewards cannot influence the data.
class RewardFreeView {
 public:
  explicit RewardFreeView(world::Environment& env) : env_(env) {}

  struct Step {
    ObservationSet observations;
    bool done = false;
  };

  ObservationSet reset() { return env_.reset(); }
  Step step(const Matrix& actions) {
    auto r = env_.step(actions);
    return {std::move(r.observations), r.done};
  }
  std::size_t num_agents() const { return env_.num_agents(); }

 private:
  world::Environment& env_;
};

using EnvFactory = std::function<std::unique_ptr<world::Environment>(std::size_t n_agents, std::uint64_t seed)>;

EnvFactory forage_factory(const world::EnvConfig& base, world::TaskId task = world::TaskId::discovery);

// Uniform random actions. One environment per agent count; steps round-robin
// over them so every count is represented. Records the observation each
// action is chosen from.
PretrainDataset collect_random_policy(const EnvFactory& make_env, std::size_t steps,
                                      std::span<const std::size_t> agent_counts, std::uint64_t seed);

// Samples world states uniformly (velocities uniform over the speed disc) and
// renders their joint observations. Agent counts cycle per sample.
PretrainDataset collect_random_observations(const world::EnvConfig& config, std::size_t samples,
                                            std::span<const std::size_t> agent_counts, std::uint64_t seed);

// One "cardinality" tensor [samples] plus one "elements" tensor
// [total_elements x element_dim], and a scalar "provenance" code.
void save_dataset(const PretrainDataset& dataset, const std::filesystem::path& path);
PretrainDataset load_dataset(const std::filesystem::path& path);

struct WindowStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t window = 0;
};

// Statistics of total loss over the last ceil(fraction * n) iterations.
WindowStats trailing_window_stats(std::span<const pisa::LossBreakdown> trace, double fraction);

struct PretrainOptions {
  pisa::SetAutoencoderConfig autoencoder;
  pisa::TrainOptions training;
  double window_fraction = 0.1;
  std::uint64_t init_seed = 0;
};

struct PretrainReport {
  pisa::SetAutoencoderParams params;
  std::vector<pisa::LossBreakdown> trace;
  double loss_mean = 0.0;
  double loss_std = 0.0;
  std::size_t window = 0;
  std::size_t iterations = 0;
  Provenance provenance = Provenance::random_observation_sampling;
};

PretrainReport pretrain(const PretrainDataset& dataset, const PretrainOptions& options);

// Writes encoder.agno, loss_trace.csv and report.json into `dir`.
void save_report(const PretrainReport& report, const std::filesystem::path& dir);
PretrainReport load_report(const std::filesystem::path& dir, const pisa::SetAutoencoderConfig& autoencoder);

}  // namespace agnocomm::pretrain
