#pragma once

// Independent PPO with one policy shared by every agent. The policy sees
// [latent ; own observation]; the latent comes from the communication layer
// (task_agnostic / task_specific) or is all zeros (no_comms).

#include <agnocomm/comms.hpp>
#include <agnocomm/nn.hpp>
#include <agnocomm/stats.hpp>
#include <agnocomm/world.hpp>

#include <concepts>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace agnocomm::ippo {

using pisa::ObservationSet;

enum class ArmId { task_agnostic, task_specific, no_comms };

std::string_view to_string(ArmId arm);
ArmId parse_arm(std::string_view name);

struct TrainConfig {
  double gamma = 0.99;
  double gae_lambda = 0.9;
  double clip = 0.2;
  double lr = 5e-5;
  double kl_coeff = 0.01;
  double kl_target = 0.01;
  double entropy_coeff = 0.0;
  double vf_coeff = 1.0;
  std::size_t train_batch = 6000;  // environment steps per iteration
  std::size_t minibatch = 512;     // agent samples per SGD step
  std::size_t sgd_epochs = 10;
  std::size_t iterations = 60;
  std::size_t rollout_fragment = 125;
  std::vector<std::size_t> hidden = {256};
  // Width of the latent slot when no encoder is supplied (no_comms).
  std::size_t latent_dim = 72;
  double initial_log_std = 0.0;
  std::size_t workers = 1;
  // Gaussian noise replaces this agent's observation every step (OOD probe).
  std::optional<std::size_t> noise_agent;
  // Decode every encoded set to log reconstruction error (costs a decoder pass).
  bool record_reconstruction = true;

  std::size_t num_envs() const;
  void validate() const;
};

struct PolicyParams {
  nn::Mlp policy;  // input -> action means
  nn::Mlp value;   // input -> scalar
  Vector log_std;  // state-independent, clamped to [kMinLogStd, kMaxLogStd]

  std::size_t input_dim() const { return policy.input_dim(); }
  std::size_t action_dim() const { return static_cast<std::size_t>(log_std.size()); }
  PolicyParams zeros_like() const;
};

inline constexpr double kMinLogStd = -5.0;
inline constexpr double kMaxLogStd = 2.0;

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, PolicyParams>
void visit_tensors(P& p, F&& f) {
  nn::visit_tensors(p.policy, "policy", f);
  nn::visit_tensors(p.value, "value", f);
  f(std::string("log_std"), p.log_std);
}

// Hidden layers tanh; final layers N(0, 0.01^2) with zero bias.
PolicyParams make_policy(std::size_t input_dim, std::size_t action_dim, std::span<const std::size_t> hidden,
                         double initial_log_std, Rng& rng);

void save(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_policy(const std::filesystem::path& path, std::size_t input_dim, std::size_t action_dim,
                         std::span<const std::size_t> hidden);

// ---- diagonal Gaussian ----

double gaussian_log_prob(const Vector& action, const Vector& mean, const Vector& log_std);
double gaussian_entropy(const Vector& log_std);
// KL(old || new)
double gaussian_kl(const Vector& mean_old, const Vector& log_std_old, const Vector& mean_new,
                   const Vector& log_std_new);

// ---- advantages ----

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> value_targets;  // advantages + values
};

// One time-ordered stream. dones[t] marks that the episode ended after step t
// (no bootstrapping across it); `bootstrap_value` is V of the state following
// the last step and is ignored when the last step is terminal.
GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const std::uint8_t> dones,
              double bootstrap_value, double gamma, double lambda);

// In place: mean 0, standard deviation 1 (population).
void normalize_advantages(std::span<double> advantages);

// ---- rollouts ----

struct RolloutBatch {
  std::size_t num_envs = 0;
  std::size_t fragment = 0;
  std::size_t num_agents = 0;

  // Agent samples, column/index s = (env * fragment + step) * num_agents + agent.
  Matrix observations;   // [obs_dim x S]
  Matrix latents;        // [latent_dim x S]
  Matrix actions;        // [action_dim x S]
  Matrix action_means;   // [action_dim x S]
  Vector log_std;        // behaviour policy log-std
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> dones;
  std::vector<double> bootstrap_values;  // [env * num_agents + agent]

  // Observation sets behind the latents; kept only when the encoder trains.
  std::vector<ObservationSet> sets;
  std::vector<std::size_t> set_index;  // per sample

  std::vector<double> advantages;
  std::vector<double> value_targets;

  std::vector<double> episode_returns;        // episodes completed during this rollout
  std::vector<std::size_t> episode_envs;      // env of each completed episode
  std::vector<double> reconstruction_losses;  // per encoded set (total loss)
  std::vector<double> reconstruction_rmse;    // per encoded set

  std::size_t size() const { return log_probs.size(); }
  std::size_t index(std::size_t env, std::size_t step, std::size_t agent) const {
    return (env * fragment + step) * num_agents + agent;
  }
  Matrix policy_inputs() const;  // [latent ; obs] for every sample
};

// Fills advantages (normalized over the whole batch) and value targets.
void compute_advantages(RolloutBatch& batch, double gamma, double lambda);

// How the latent for each step is produced.
struct LatentSource {
  ArmId arm = ArmId::no_comms;
  comms::CommLayer* comm = nullptr;  // required unless arm == no_comms
  std::size_t latent_dim = 0;
  bool keep_sets = false;            // store observation sets (end-to-end encoder training)
  bool record_reconstruction = true;
};

using EnvMaker = std::function<std::unique_ptr<world::Environment>(std::uint64_t seed)>;

// Persistent vectorised environments. Episodes continue across collect()
// calls; finished episodes reset automatically. Results do not depend on the
// number of workers.
class Sampler {
 public:
  Sampler(const world::EnvConfig& config, world::TaskId task, std::size_t num_envs, std::uint64_t seed,
          std::optional<std::size_t> noise_agent = std::nullopt, std::size_t workers = 1);
  Sampler(const EnvMaker& make_env, std::size_t num_envs, std::uint64_t seed,
          std::optional<std::size_t> noise_agent = std::nullopt, std::size_t workers = 1);

  RolloutBatch collect(const PolicyParams& params, const LatentSource& source, std::size_t fragment,
                       bool deterministic = false);

  std::size_t num_envs() const { return envs_.size(); }
  std::size_t num_agents() const { return num_agents_; }
  std::size_t observation_dim() const { return observation_dim_; }

 private:
  // Latent of every (env, agent), column env * num_agents + agent. With
  // `batch` set, reconstruction errors and (if requested) sets are stored.
  Matrix latents_for(const std::vector<ObservationSet>& joints, const LatentSource& source,
                     RolloutBatch* batch, std::vector<std::size_t>* set_ids);
  std::vector<ObservationSet> joint_observations();

  std::vector<std::unique_ptr<world::Environment>> envs_;
  std::size_t num_agents_ = 0;
  std::size_t observation_dim_ = 0;
  std::vector<ObservationSet> current_;
  std::vector<Rng> action_rngs_;
  std::vector<Rng> noise_rngs_;
  std::vector<double> running_return_;
  std::optional<std::size_t> noise_agent_;
  std::size_t workers_;
};

// ---- loss ----

struct SurrogateCoefficients {
  double clip = 0.2;
  double kl_coeff = 0.01;
  double vf_coeff = 1.0;
  double entropy_coeff = 0.0;
};

// A minibatch view: policy inputs plus the behaviour-policy bookkeeping.
struct SurrogateBatch {
  Matrix inputs;        // [input_dim x B]
  Matrix actions;       // [action_dim x B]
  Matrix old_means;     // [action_dim x B]
  Vector old_log_std;
  Vector old_log_probs;
  Vector advantages;
  Vector value_targets;
};

struct SurrogateTerms {
  double loss = 0.0;
  double policy_loss = 0.0;  // clipped surrogate, negated
  double value_loss = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double max_ratio_deviation = 0.0;  // max |ratio - 1|
};

// Mean over the batch of
//   -min(r A, clip(r) A) + kl_coeff KL(old || new) + vf_coeff (V - target)^2 - entropy_coeff H
// When `grads` is set, parameter gradients are added to it; when
// `input_grad` is set it receives dLoss/dInputs.
SurrogateTerms ppo_surrogate(const PolicyParams& params, const SurrogateBatch& batch,
                             const SurrogateCoefficients& coeffs, PolicyParams* grads = nullptr,
                             Matrix* input_grad = nullptr);

SurrogateBatch gather(const RolloutBatch& batch, std::span<const std::size_t> samples);

// Minibatch whose latent rows are recomputed from observation sets by a
// trainable encoder.
struct EndToEndBatch {
  SurrogateBatch base;                   // latent rows of base.inputs are overwritten
  std::vector<ObservationSet> sets;
  std::vector<std::size_t> set_index;    // per sample
};

EndToEndBatch gather_end_to_end(const RolloutBatch& batch, std::span<const std::size_t> samples);

SurrogateTerms end_to_end_surrogate(const PolicyParams& policy, const pisa::SetAutoencoderParams& encoder,
                                    const EndToEndBatch& batch, const SurrogateCoefficients& coeffs,
                                    PolicyParams* policy_grads = nullptr,
                                    pisa::SetAutoencoderParams* encoder_grads = nullptr);

// ---- training ----

struct IterationMetrics {
  std::size_t iteration = 0;
  std::size_t env_steps = 0;
  double mean_return = 0.0;
  double return_p025 = 0.0;
  double return_p975 = 0.0;
  double recon_rmse_mean = 0.0;
  double recon_loss_mean = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double kl_coeff = 0.0;
  double first_minibatch_ratio_deviation = 0.0;
};

using IterationCallback = std::function<void(const IterationMetrics&)>;

struct TrainArmResult {
  PolicyParams policy;
  std::vector<IterationMetrics> metrics;
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
};

// task_agnostic and task_specific need a frozen encoder (ConfigError
// otherwise); its checksum is verified unchanged after training.
TrainArmResult train_arm(Sampler& sampler, ArmId arm, const TrainConfig& config, const comms::CommConfig& comm,
                         std::shared_ptr<const pisa::SetAutoencoderParams> encoder, std::uint64_t seed,
                         const IterationCallback& on_iteration = {});
TrainArmResult train_arm(const world::EnvConfig& env, world::TaskId task, ArmId arm, const TrainConfig& config,
                         const comms::CommConfig& comm, std::shared_ptr<const pisa::SetAutoencoderParams> encoder,
                         std::uint64_t seed, const IterationCallback& on_iteration = {});

struct SourceTrainingResult {
  pisa::SetAutoencoderParams encoder;
  std::vector<IterationMetrics> metrics;
};

// End-to-end variant: PPO gradients flow through the encoder. The policy is
// discarded; the encoder becomes the task-specific communication strategy.
SourceTrainingResult train_task_specific_source(const world::EnvConfig& env, world::TaskId source_task,
                                                const TrainConfig& config, const comms::CommConfig& comm,
                                                pisa::SetAutoencoderParams initial_encoder, std::uint64_t seed,
                                                const IterationCallback& on_iteration = {});

// Mean return over `episodes` episodes with deterministic (mean) actions.
double evaluate(const PolicyParams& params, const world::EnvConfig& env, world::TaskId task, ArmId arm,
                const comms::CommConfig& comm, std::shared_ptr<const pisa::SetAutoencoderParams> encoder,
                std::size_t episodes, std::uint64_t seed);

struct EvalSummary {
  std::vector<double> per_seed_means;
  stats::Interval interval;
};

EvalSummary summarize(std::span<const double> per_seed_means);

}  // namespace agnocomm::ippo
