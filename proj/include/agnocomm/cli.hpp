#pragma once

// Pipeline driver behind the `agnocomm` executable.
//
// Config files are JSON. Nested objects are flattened into dotted keys
// ("env": {"n_agents": 3} is the key env.n_agents) and every key may be
// overridden from the environment as AGNOCOMM_<KEY>, dots replaced by
// underscores and upper-cased (AGNOCOMM_ENV_N_AGENTS=5). Unknown keys are
// rejected.

#include <agnocomm/comms.hpp>
#include <agnocomm/ippo.hpp>
#include <agnocomm/pretrain.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace agnocomm::cli {

struct RunConfig {
  world::EnvConfig env;
  comms::CommConfig comm;
  pisa::SetAutoencoderConfig autoencoder;  // element_dim follows env
  ippo::TrainConfig train;

  std::filesystem::path out = "runs/default";
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

  // collect
  std::string collect_mode = "random_policy";
  std::size_t collect_samples = 0;
  std::vector<std::size_t> collect_agent_counts = {1, 2, 3};
  world::TaskId collect_task = world::TaskId::discovery;

  // pretrain
  std::string pretrain_objective = "reconstruction";  // or "rl" (task-specific source)
  std::filesystem::path pretrain_dataset;             // default <out>/dataset.agno
  pisa::TrainOptions pretrain_training = [] {
    pisa::TrainOptions o;
    o.final_lr_fraction = 0.02;
    return o;
  }();
  double pretrain_window_fraction = 0.1;
  world::TaskId pretrain_source_task = world::TaskId::flocking;

  // train
  ippo::ArmId arm = ippo::ArmId::no_comms;
  world::TaskId task = world::TaskId::discovery;
  std::filesystem::path encoder_dir;  // holds encoder.agno; default <out>

  // eval
  std::size_t eval_episodes = 20;

  // ood
  std::string ood_mode = "run";  // "run": read training metrics; "live": fresh rollouts
  std::size_t ood_window = 10;
  std::size_t ood_iterations = 20;
  std::optional<std::size_t> ood_noise_agent;
  std::filesystem::path ood_calibration;  // default <encoder_dir>/calibration.json

  std::filesystem::path encoder_directory() const { return encoder_dir.empty() ? out : encoder_dir; }
  std::filesystem::path dataset_path() const { return pretrain_dataset.empty() ? out / "dataset.agno" : pretrain_dataset; }
  std::filesystem::path calibration_path() const {
    return ood_calibration.empty() ? encoder_directory() / "calibration.json" : ood_calibration;
  }
};

using Environment = std::map<std::string, std::string>;

// Reads the current process environment (AGNOCOMM_* entries only).
Environment process_environment();

// Strict load: unknown keys and wrongly typed values throw ConfigError naming
// the key; keys in `required` must be present in the file or environment.
RunConfig load_config(const std::filesystem::path& path, const Environment& env,
                      const std::vector<std::string>& required = {});

// Canonical JSON text of every key's effective value.
std::string canonical_config(const RunConfig& config);
std::string config_hash(const RunConfig& config);  // 16 hex digits

// Column layout of the per-seed metrics files. The last three columns carry
// the out-of-distribution verdict once a calibration exists and the loss
// window is full; they are empty otherwise.
std::vector<std::string> metrics_header();
std::vector<std::string> aggregate_header();

// Entry point; returns the process exit code (0 ok, 1 error, 2 OOD detected).
int run(int argc, char** argv, const Environment& env);

}  // namespace agnocomm::cli
