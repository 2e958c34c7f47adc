#pragma once

// Communication layer: who can hear whom, what each agent's observation set
// is, and how it becomes the latent state fed to the policy.

#include <agnocomm/set_autoencoder.hpp>

#include <deque>
#include <limits>
#include <memory>
#include <span>
#include <vector>

namespace agnocomm::comms {

using pisa::ObservationSet;

struct CommConfig {
  // Communication range; infinity means full connectivity.
  double epsilon = std::numeric_limits<double>::infinity();
};

struct Neighborhood {
  std::size_t agent = 0;
  std::vector<std::size_t> members;  // ascending, never contains `agent`
};

// {j != i : |p_i - p_j| <= epsilon}
Neighborhood neighborhood(std::span<const Vec2> positions, double epsilon, std::size_t i);

// Own observation followed by the neighbors' observations.
ObservationSet assemble_observation_set(std::size_t i, const ObservationSet& joint, const Neighborhood& nbhd);

// Observation sets for every agent. With full connectivity all agents share
// one set (the joint observation) and set_of_agent is all zeros.
struct AgentSets {
  std::vector<ObservationSet> sets;
  std::vector<std::size_t> set_of_agent;
};

AgentSets agent_observation_sets(const ObservationSet& joint, std::span<const Vec2> positions, double epsilon);

// [latent ; own_obs]
Vector policy_input(const Vector& latent, const Vector& own_obs);

// Mean reconstruction loss per training iteration, keeping the last
// `capacity` iterations.
class LossWindow {
 public:
  explicit LossWindow(std::size_t capacity = 10) : capacity_(capacity) {}

  void record(double loss);
  void record(std::span<const double> losses);
  // Closes the current iteration. Iterations with no recorded sets are skipped.
  void end_iteration();

  std::vector<double> values() const { return {history_.begin(), history_.end()}; }
  bool full() const { return history_.size() == capacity_; }
  std::size_t capacity() const { return capacity_; }
  double pending_mean() const;

 private:
  std::size_t capacity_;
  std::deque<double> history_;
  double pending_sum_ = 0.0;
  std::size_t pending_count_ = 0;
};

// Encodes observation sets with a frozen autoencoder and records their
// reconstruction losses.
class CommLayer {
 public:
  CommLayer(CommConfig config, std::shared_ptr<const pisa::SetAutoencoderParams> encoder,
            std::size_t window = 10);

  Vector encode_state(const ObservationSet& set);

  struct Encoded {
    Matrix latents;                            // [latent_dim x sets]
    std::vector<pisa::LossBreakdown> losses;   // empty unless requested
  };
  // Batched encoding; when record_loss is set each set's loss is also added
  // to the window.
  Encoded encode_states(std::span<const ObservationSet> sets, bool record_loss);

  const CommConfig& config() const { return config_; }
  const pisa::SetAutoencoderParams& encoder() const { return *encoder_; }
  std::size_t latent_dim() const { return encoder_->latent_dim(); }
  LossWindow& window() { return window_; }
  const LossWindow& window() const { return window_; }

 private:
  CommConfig config_;
  std::shared_ptr<const pisa::SetAutoencoderParams> encoder_;
  LossWindow window_;
};

}  // namespace agnocomm::comms
