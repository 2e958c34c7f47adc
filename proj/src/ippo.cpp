#include <agnocomm/ippo.hpp>

#include <agnocomm/adam.hpp>
#include <agnocomm/checkpoint.hpp>
#include <agnocomm/ood.hpp>
#include <agnocomm/params.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <thread>

namespace agnocomm::ippo {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t w = std::min(workers, n);
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (std::size_t k = 0; k < w; ++k) {
    threads.emplace_back([&, k] {
      for (std::size_t i = k; i < n; i += w) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

void clamp_log_std(Vector& log_std) {
  for (Eigen::Index k = 0; k < log_std.size(); ++k) log_std[k] = std::clamp(log_std[k], kMinLogStd, kMaxLogStd);
}

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

std::string_view to_string(ArmId arm) {
  switch (arm) {
    case ArmId::task_agnostic: return "task_agnostic";
    case ArmId::task_specific: return "task_specific";
    case ArmId::no_comms: return "no_comms";
  }
  return "unknown";
}

ArmId parse_arm(std::string_view name) {
  if (name == "task_agnostic") return ArmId::task_agnostic;
  if (name == "task_specific") return ArmId::task_specific;
  if (name == "no_comms") return ArmId::no_comms;
  throw ConfigError("unknown arm '" + std::string(name) + "'");
}

std::size_t TrainConfig::num_envs() const {
  return std::max<std::size_t>(1, (train_batch + rollout_fragment - 1) / rollout_fragment);
}

void TrainConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("gae_lambda must be in [0, 1]");
  if (!(clip > 0.0)) throw ConfigError("clip must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (kl_coeff < 0.0 || kl_target < 0.0 || entropy_coeff < 0.0 || vf_coeff < 0.0)
    throw ConfigError("loss coefficients must be non-negative");
  if (train_batch == 0 || minibatch == 0 || rollout_fragment == 0 || iterations == 0)
    throw ConfigError("train_batch, minibatch, rollout_fragment and iterations must be positive");
  if (hidden.empty()) throw ConfigError("policy needs at least one hidden layer");
}

PolicyParams PolicyParams::zeros_like() const {
  PolicyParams z{policy.zeros_like(), value.zeros_like(), Vector::Zero(log_std.size())};
  return z;
}

PolicyParams make_policy(std::size_t input_dim, std::size_t action_dim, std::span<const std::size_t> hidden,
                         double initial_log_std, Rng& rng) {
  std::vector<std::size_t> pdims{input_dim};
  pdims.insert(pdims.end(), hidden.begin(), hidden.end());
  std::vector<std::size_t> vdims = pdims;
  pdims.push_back(action_dim);
  vdims.push_back(1);
  PolicyParams p;
  p.policy = nn::make_mlp(pdims, nn::Activation::tanh, nn::Activation::identity, rng, 0.01);
  p.value = nn::make_mlp(vdims, nn::Activation::tanh, nn::Activation::identity, rng, 0.01);
  p.log_std = Vector::Constant(idx(action_dim), std::clamp(initial_log_std, kMinLogStd, kMaxLogStd));
  return p;
}

void save(const PolicyParams& params, const std::filesystem::path& path) {
  write_checkpoint(path, to_tensors(params));
}

PolicyParams load_policy(const std::filesystem::path& path, std::size_t input_dim, std::size_t action_dim,
                         std::span<const std::size_t> hidden) {
  Rng rng(0);
  auto params = make_policy(input_dim, action_dim, hidden, 0.0, rng);
  from_tensors(params, read_checkpoint(path));
  return params;
}

// ---- Gaussian ----

double gaussian_log_prob(const Vector& action, const Vector& mean, const Vector& log_std) {
  double lp = 0.0;
  for (Eigen::Index k = 0; k < action.size(); ++k) {
    const double z = (action[k] - mean[k]) * std::exp(-log_std[k]);
    lp += -0.5 * z * z - log_std[k] - 0.5 * kLog2Pi;
  }
  return lp;
}

double gaussian_entropy(const Vector& log_std) {
  return log_std.sum() + 0.5 * static_cast<double>(log_std.size()) * (kLog2Pi + 1.0);
}

double gaussian_kl(const Vector& mean_old, const Vector& log_std_old, const Vector& mean_new,
                   const Vector& log_std_new) {
  double kl = 0.0;
  for (Eigen::Index k = 0; k < mean_old.size(); ++k) {
    const double var_old = std::exp(2.0 * log_std_old[k]);
    const double var_new = std::exp(2.0 * log_std_new[k]);
    const double d = mean_old[k] - mean_new[k];
    kl += log_std_new[k] - log_std_old[k] + (var_old + d * d) / (2.0 * var_new) - 0.5;
  }
  return kl;
}

// ---- advantages ----

GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const std::uint8_t> dones,
              double bootstrap_value, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw ConfigError("gae: rewards, values and dones differ in length");
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.value_targets.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double nonterminal = dones[k] ? 0.0 : 1.0;
    const double next_value = k + 1 == n ? bootstrap_value : values[k + 1];
    const double delta = rewards[k] + gamma * next_value * nonterminal - values[k];
    running = delta + gamma * lambda * nonterminal * running;
    out.advantages[k] = running;
    out.value_targets[k] = running + values[k];
  }
  return out;
}

void normalize_advantages(std::span<double> advantages) {
  if (advantages.empty()) return;
  const double m = stats::mean(advantages);
  for (double& a : advantages) a -= m;
  const double s = stats::population_std(advantages);
  if (s > 0.0)
    for (double& a : advantages) a /= s;
}

Matrix RolloutBatch::policy_inputs() const {
  Matrix x(latents.rows() + observations.rows(), observations.cols());
  x.topRows(latents.rows()) = latents;
  x.bottomRows(observations.rows()) = observations;
  return x;
}

void compute_advantages(RolloutBatch& batch, double gamma, double lambda) {
  const std::size_t n = batch.size();
  batch.advantages.assign(n, 0.0);
  batch.value_targets.assign(n, 0.0);
  std::vector<double> r(batch.fragment), v(batch.fragment);
  std::vector<std::uint8_t> d(batch.fragment);
  for (std::size_t e = 0; e < batch.num_envs; ++e) {
    for (std::size_t i = 0; i < batch.num_agents; ++i) {
      for (std::size_t t = 0; t < batch.fragment; ++t) {
        const std::size_t s = batch.index(e, t, i);
        r[t] = batch.rewards[s];
        v[t] = batch.values[s];
        d[t] = batch.dones[s];
      }
      const auto res = gae(r, v, d, batch.bootstrap_values[e * batch.num_agents + i], gamma, lambda);
      for (std::size_t t = 0; t < batch.fragment; ++t) {
        const std::size_t s = batch.index(e, t, i);
        batch.advantages[s] = res.advantages[t];
        batch.value_targets[s] = res.value_targets[t];
      }
    }
  }
  normalize_advantages(batch.advantages);
}

// ---- sampler ----

Sampler::Sampler(const world::EnvConfig& config, world::TaskId task, std::size_t num_envs, std::uint64_t seed,
                 std::optional<std::size_t> noise_agent, std::size_t workers)
    : Sampler(
          [&](std::uint64_t env_seed) {
            auto c = config;
            c.seed = env_seed;
            return std::make_unique<world::ForageWorld>(c, task);
          },
          num_envs, seed, noise_agent, workers) {}

Sampler::Sampler(const EnvMaker& make_env, std::size_t num_envs, std::uint64_t seed,
                 std::optional<std::size_t> noise_agent, std::size_t workers)
    : noise_agent_(noise_agent), workers_(std::max<std::size_t>(1, workers)) {
  if (num_envs == 0) throw ConfigError("sampler needs at least one environment");
  envs_.reserve(num_envs);
  for (std::size_t e = 0; e < num_envs; ++e) {
    envs_.push_back(make_env(derive_seed(seed, e)));
    current_.push_back(envs_.back()->reset());
    action_rngs_.emplace_back(derive_seed(seed, 1'000'000 + e));
    noise_rngs_.emplace_back(derive_seed(seed, 2'000'000 + e));
  }
  num_agents_ = envs_.front()->num_agents();
  observation_dim_ = envs_.front()->observation_dim();
  for (const auto& env : envs_)
    if (env->num_agents() != num_agents_ || env->observation_dim() != observation_dim_)
      throw ConfigError("sampler environments disagree on agent count or observation width");
  if (noise_agent_ && *noise_agent_ >= num_agents_) throw ConfigError("noise agent index out of range");
  running_return_.assign(num_envs, 0.0);
}

std::vector<ObservationSet> Sampler::joint_observations() {
  std::vector<ObservationSet> joints = current_;
  if (noise_agent_)
    for (std::size_t e = 0; e < joints.size(); ++e)
      joints[e] = ood::inject_noise_observation(joints[e], *noise_agent_, noise_rngs_[e]);
  return joints;
}

Matrix Sampler::latents_for(const std::vector<ObservationSet>& joints, const LatentSource& source,
                            RolloutBatch* batch, std::vector<std::size_t>* set_ids) {
  const std::size_t n = num_agents_;
  const std::size_t E = joints.size();
  Matrix latents = Matrix::Zero(idx(source.latent_dim), idx(E * n));
  if (source.arm == ArmId::no_comms) return latents;
  if (source.comm == nullptr) throw ConfigError("rollout: communication arm without an encoder");
  if (source.comm->latent_dim() != source.latent_dim) throw ConfigError("rollout: latent width mismatch");

  std::vector<ObservationSet> sets;
  std::vector<std::size_t> owner(E * n);
  for (std::size_t e = 0; e < E; ++e) {
    const auto& positions = envs_[e]->state().positions;
    auto agent_sets = comms::agent_observation_sets(joints[e], positions, source.comm->config().epsilon);
    const std::size_t base = sets.size();
    for (std::size_t i = 0; i < n; ++i) owner[e * n + i] = base + agent_sets.set_of_agent[i];
    for (auto& s : agent_sets.sets) sets.push_back(std::move(s));
  }

  const bool record = batch != nullptr && source.record_reconstruction;
  auto encoded = source.comm->encode_states(sets, record);
  for (std::size_t c = 0; c < E * n; ++c) latents.col(idx(c)) = encoded.latents.col(idx(owner[c]));

  if (record) {
    for (const auto& l : encoded.losses) {
      batch->reconstruction_losses.push_back(l.total);
      batch->reconstruction_rmse.push_back(std::sqrt(l.element));
    }
  }
  if (batch != nullptr && source.keep_sets && set_ids != nullptr) {
    const std::size_t base = batch->sets.size();
    set_ids->resize(E * n);
    for (std::size_t c = 0; c < E * n; ++c) (*set_ids)[c] = base + owner[c];
    for (auto& s : sets) batch->sets.push_back(std::move(s));
  }
  return latents;
}

RolloutBatch Sampler::collect(const PolicyParams& params, const LatentSource& source, std::size_t fragment,
                              bool deterministic) {
  const std::size_t E = envs_.size();
  const std::size_t n = num_agents_;
  const std::size_t obs_dim = observation_dim_;
  const std::size_t act_dim = params.action_dim();
  if (params.input_dim() != source.latent_dim + obs_dim) throw ConfigError("rollout: policy input width mismatch");
  if (act_dim != 2) throw ConfigError("rollout: policy must output 2D accelerations");

  RolloutBatch batch;
  batch.num_envs = E;
  batch.fragment = fragment;
  batch.num_agents = n;
  const std::size_t S = E * fragment * n;
  batch.observations.resize(idx(obs_dim), idx(S));
  batch.latents.resize(idx(source.latent_dim), idx(S));
  batch.actions.resize(idx(act_dim), idx(S));
  batch.action_means.resize(idx(act_dim), idx(S));
  batch.log_std = params.log_std;
  batch.log_probs.resize(S);
  batch.rewards.resize(S);
  batch.values.resize(S);
  batch.dones.resize(S);
  if (source.keep_sets) batch.set_index.resize(S);

  const Vector sigma = params.log_std.array().exp();
  std::vector<std::size_t> set_ids;
  std::vector<world::StepResult> results(E);
  Matrix inputs(idx(source.latent_dim + obs_dim), idx(E * n));

  for (std::size_t t = 0; t < fragment; ++t) {
    const auto joints = joint_observations();
    const Matrix latents = latents_for(joints, source, &batch, &set_ids);
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = idx(e * n + i);
        inputs.col(c).head(idx(source.latent_dim)) = latents.col(c);
        inputs.col(c).tail(idx(obs_dim)) = joints[e].elements().col(idx(i));
      }
    const Matrix means = nn::forward(params.policy, inputs);
    const Matrix values = nn::forward(params.value, inputs);

    std::vector<Matrix> actions(E, Matrix(idx(act_dim), idx(n)));
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = idx(e * n + i);
        Vector a = means.col(c);
        if (!deterministic)
          for (std::size_t k = 0; k < act_dim; ++k) a[idx(k)] += sigma[idx(k)] * standard_normal(action_rngs_[e]);
        actions[e].col(idx(i)) = a;
        const auto s = idx(batch.index(e, t, i));
        batch.observations.col(s) = inputs.col(c).tail(idx(obs_dim));
        batch.latents.col(s) = latents.col(c);
        batch.actions.col(s) = a;
        batch.action_means.col(s) = means.col(c);
        batch.log_probs[static_cast<std::size_t>(s)] = gaussian_log_prob(a, means.col(c), params.log_std);
        batch.values[static_cast<std::size_t>(s)] = values(0, c);
        if (source.keep_sets) batch.set_index[static_cast<std::size_t>(s)] = set_ids[e * n + i];
      }
    }

    parallel_for(E, workers_, [&](std::size_t e) { results[e] = envs_[e]->step(actions[e]); });

    for (std::size_t e = 0; e < E; ++e) {
      const auto& res = results[e];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = batch.index(e, t, i);
        batch.rewards[s] = res.reward;
        batch.dones[s] = res.done ? 1 : 0;
      }
      running_return_[e] += res.reward;
      if (res.done) {
        batch.episode_returns.push_back(running_return_[e]);
        batch.episode_envs.push_back(e);
        running_return_[e] = 0.0;
        current_[e] = envs_[e]->reset();
      } else {
        current_[e] = res.observations;
      }
    }
  }

  const auto joints = joint_observations();
  const Matrix latents = latents_for(joints, source, nullptr, nullptr);
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = idx(e * n + i);
      inputs.col(c).head(idx(source.latent_dim)) = latents.col(c);
      inputs.col(c).tail(idx(obs_dim)) = joints[e].elements().col(idx(i));
    }
  const Matrix values = nn::forward(params.value, inputs);
  batch.bootstrap_values.assign(values.data(), values.data() + values.size());
  return batch;
}

// ---- loss ----

SurrogateBatch gather(const RolloutBatch& batch, std::span<const std::size_t> samples) {
  const auto L = batch.latents.rows();
  const auto O = batch.observations.rows();
  const auto B = idx(samples.size());
  SurrogateBatch out;
  out.inputs.resize(L + O, B);
  out.actions.resize(batch.actions.rows(), B);
  out.old_means.resize(batch.actions.rows(), B);
  out.old_log_std = batch.log_std;
  out.old_log_probs.resize(B);
  out.advantages.resize(B);
  out.value_targets.resize(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto s = samples[static_cast<std::size_t>(b)];
    out.inputs.col(b).head(L) = batch.latents.col(idx(s));
    out.inputs.col(b).tail(O) = batch.observations.col(idx(s));
    out.actions.col(b) = batch.actions.col(idx(s));
    out.old_means.col(b) = batch.action_means.col(idx(s));
    out.old_log_probs[b] = batch.log_probs[s];
    out.advantages[b] = batch.advantages.empty() ? 0.0 : batch.advantages[s];
    out.value_targets[b] = batch.value_targets.empty() ? 0.0 : batch.value_targets[s];
  }
  return out;
}

SurrogateTerms ppo_surrogate(const PolicyParams& params, const SurrogateBatch& batch,
                             const SurrogateCoefficients& coeffs, PolicyParams* grads, Matrix* input_grad) {
  const Eigen::Index B = batch.inputs.cols();
  if (B == 0) throw ConfigError("ppo_surrogate: empty batch");
  const Eigen::Index A = idx(params.action_dim());
  const bool need_backward = grads != nullptr || input_grad != nullptr;
  nn::MlpTape ptape, vtape;
  const Matrix means = nn::forward(params.policy, batch.inputs, need_backward ? &ptape : nullptr);
  const Matrix values = nn::forward(params.value, batch.inputs, need_backward ? &vtape : nullptr);

  const Vector& s = params.log_std;
  const Vector var = (2.0 * s).array().exp();
  const Vector var_old = (2.0 * batch.old_log_std).array().exp();
  const double inv_b = 1.0 / static_cast<double>(B);

  Matrix d_mean = Matrix::Zero(A, B);
  Matrix d_value(1, B);
  Vector d_log_std = Vector::Zero(A);
  SurrogateTerms terms;

  for (Eigen::Index b = 0; b < B; ++b) {
    double logp = 0.0;
    for (Eigen::Index k = 0; k < A; ++k) {
      const double diff = batch.actions(k, b) - means(k, b);
      logp += -0.5 * diff * diff / var[k] - s[k] - 0.5 * kLog2Pi;
    }
    const double ratio = std::exp(logp - batch.old_log_probs[b]);
    const double adv = batch.advantages[b];
    const double clipped = std::clamp(ratio, 1.0 - coeffs.clip, 1.0 + coeffs.clip);
    const double unclipped_obj = ratio * adv;
    const double clipped_obj = clipped * adv;
    terms.policy_loss -= std::min(unclipped_obj, clipped_obj) * inv_b;
    terms.max_ratio_deviation = std::max(terms.max_ratio_deviation, std::abs(ratio - 1.0));
    // d(-min)/d logp, nonzero only when the unclipped branch is selected
    const double d_logp = unclipped_obj <= clipped_obj ? -adv * ratio * inv_b : 0.0;

    double kl = 0.0;
    for (Eigen::Index k = 0; k < A; ++k) {
      const double diff = batch.actions(k, b) - means(k, b);
      const double dm = means(k, b) - batch.old_means(k, b);
      kl += s[k] - batch.old_log_std[k] + (var_old[k] + dm * dm) / (2.0 * var[k]) - 0.5;
      d_mean(k, b) += d_logp * diff / var[k] + coeffs.kl_coeff * inv_b * dm / var[k];
      d_log_std[k] += d_logp * (diff * diff / var[k] - 1.0) +
                      coeffs.kl_coeff * inv_b * (1.0 - (var_old[k] + dm * dm) / var[k]);
    }
    terms.kl += kl * inv_b;

    const double verr = values(0, b) - batch.value_targets[b];
    terms.value_loss += verr * verr * inv_b;
    d_value(0, b) = 2.0 * coeffs.vf_coeff * verr * inv_b;
  }
  terms.entropy = gaussian_entropy(s);
  d_log_std.array() -= coeffs.entropy_coeff;
  terms.loss = terms.policy_loss + coeffs.kl_coeff * terms.kl + coeffs.vf_coeff * terms.value_loss -
               coeffs.entropy_coeff * terms.entropy;
  if (!std::isfinite(terms.loss)) throw NumericalError("ppo_surrogate: non-finite loss");

  if (need_backward) {
    PolicyParams scratch;
    PolicyParams* g = grads;
    if (g == nullptr) {
      scratch = params.zeros_like();
      g = &scratch;
    }
    Matrix gin = nn::backward(params.policy, ptape, d_mean, g->policy);
    gin += nn::backward(params.value, vtape, d_value, g->value);
    g->log_std += d_log_std;
    if (input_grad != nullptr) *input_grad = std::move(gin);
  }
  return terms;
}

EndToEndBatch gather_end_to_end(const RolloutBatch& batch, std::span<const std::size_t> samples) {
  if (batch.set_index.size() != batch.size()) throw UsageError("gather_end_to_end: rollout kept no sets");
  EndToEndBatch out;
  out.base = gather(batch, samples);
  std::map<std::size_t, std::size_t> local;
  out.set_index.reserve(samples.size());
  for (std::size_t s : samples) {
    const std::size_t g = batch.set_index[s];
    auto [it, inserted] = local.emplace(g, out.sets.size());
    if (inserted) out.sets.push_back(batch.sets[g]);
    out.set_index.push_back(it->second);
  }
  return out;
}

SurrogateTerms end_to_end_surrogate(const PolicyParams& policy, const pisa::SetAutoencoderParams& encoder,
                                    const EndToEndBatch& batch, const SurrogateCoefficients& coeffs,
                                    PolicyParams* policy_grads, pisa::SetAutoencoderParams* encoder_grads) {
  const auto L = idx(encoder.latent_dim());
  const auto sets = pisa::make_batch(batch.sets);
  pisa::EncoderTape tape;
  const Matrix z = pisa::encode(encoder, sets, encoder_grads != nullptr ? &tape : nullptr);

  SurrogateBatch sb = batch.base;
  for (Eigen::Index b = 0; b < sb.inputs.cols(); ++b)
    sb.inputs.col(b).head(L) = z.col(idx(batch.set_index[static_cast<std::size_t>(b)]));

  if (encoder_grads == nullptr) return ppo_surrogate(policy, sb, coeffs, policy_grads);

  Matrix input_grad;
  const auto terms = ppo_surrogate(policy, sb, coeffs, policy_grads, &input_grad);
  Matrix latent_grad = Matrix::Zero(L, z.cols());
  for (Eigen::Index b = 0; b < sb.inputs.cols(); ++b)
    latent_grad.col(idx(batch.set_index[static_cast<std::size_t>(b)])) += input_grad.col(b).head(L);
  pisa::encode_backward(encoder, sets, tape, latent_grad, *encoder_grads);
  return terms;
}

// ---- training ----

namespace {

struct EndToEndParams {
  PolicyParams policy;
  pisa::SetAutoencoderParams encoder;
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, EndToEndParams>
void visit_tensors(P& p, F&& f) {
  visit_tensors(p.policy, f);
  visit_tensors(p.encoder, f);
}

struct Trainer {
  const TrainConfig& config;
  ArmId arm;
  PolicyParams policy;
  // Set only for end-to-end training; the comm layer then aliases it.
  pisa::SetAutoencoderParams* trainable = nullptr;
  std::unique_ptr<comms::CommLayer> comm;
  std::size_t latent_dim = 0;
  Sampler& sampler;
  Rng shuffle_rng;
  double kl_coeff;
  std::size_t env_steps = 0;

  LatentSource source() const {
    LatentSource src;
    src.arm = arm;
    src.comm = comm.get();
    src.latent_dim = latent_dim;
    src.keep_sets = trainable != nullptr;
    src.record_reconstruction = config.record_reconstruction && comm != nullptr;
    return src;
  }

  SurrogateCoefficients coefficients() const {
    return {config.clip, kl_coeff, config.vf_coeff, config.entropy_coeff};
  }

  IterationMetrics iterate(std::size_t iteration, nn::AdamState& adam_policy, nn::AdamState& adam_joint) {
    auto batch = sampler.collect(policy, source(), config.rollout_fragment);
    compute_advantages(batch, config.gamma, config.gae_lambda);
    env_steps += batch.num_envs * batch.fragment;

    IterationMetrics m;
    m.iteration = iteration;
    m.env_steps = env_steps;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (batch.episode_returns.empty()) {
      m.mean_return = m.return_p025 = m.return_p975 = nan;
    } else {
      const auto ci = stats::central_95(batch.episode_returns);
      m.mean_return = ci.mean;
      m.return_p025 = ci.lower;
      m.return_p975 = ci.upper;
    }
    m.recon_rmse_mean = batch.reconstruction_rmse.empty() ? nan : stats::mean(batch.reconstruction_rmse);
    m.recon_loss_mean = batch.reconstruction_losses.empty() ? nan : stats::mean(batch.reconstruction_losses);
    m.kl_coeff = kl_coeff;

    const std::size_t S = batch.size();
    std::vector<std::size_t> order(S);
    std::iota(order.begin(), order.end(), 0);
    const auto coeffs = coefficients();
    bool first = true;
    for (std::size_t epoch = 0; epoch < config.sgd_epochs; ++epoch) {
      for (std::size_t k = S; k > 1; --k) std::swap(order[k - 1], order[uniform_index(shuffle_rng, k)]);
      for (std::size_t start = 0; start < S; start += config.minibatch) {
        const std::span<const std::size_t> mb(order.data() + start, std::min(config.minibatch, S - start));
        SurrogateTerms terms;
        if (trainable == nullptr) {
          auto grads = policy.zeros_like();
          terms = ppo_surrogate(policy, gather(batch, mb), coeffs, &grads);
          nn::adam_step(policy, grads, adam_policy);
        } else {
          EndToEndParams grads{policy.zeros_like(), trainable->zeros_like()};
          terms = end_to_end_surrogate(policy, *trainable, gather_end_to_end(batch, mb), coeffs, &grads.policy,
                                       &grads.encoder);
          EndToEndParams joint{std::move(policy), std::move(*trainable)};
          nn::adam_step(joint, grads, adam_joint);
          policy = std::move(joint.policy);
          *trainable = std::move(joint.encoder);
        }
        clamp_log_std(policy.log_std);
        if (first) {
          m.first_minibatch_ratio_deviation = terms.max_ratio_deviation;
          first = false;
        }
      }
    }

    // KL of the updated policy against the behaviour policy over the batch.
    double kl = 0.0;
    for (std::size_t start = 0; start < S; start += config.minibatch) {
      const std::span<const std::size_t> mb(order.data() + start, std::min(config.minibatch, S - start));
      const auto terms = trainable == nullptr
                             ? ppo_surrogate(policy, gather(batch, mb), coeffs)
                             : end_to_end_surrogate(policy, *trainable, gather_end_to_end(batch, mb), coeffs);
      kl += terms.kl * static_cast<double>(mb.size());
    }
    m.kl = kl / static_cast<double>(S);
    m.entropy = gaussian_entropy(policy.log_std);
    if (m.kl > 2.0 * config.kl_target) kl_coeff *= 1.5;
    else if (m.kl < 0.5 * config.kl_target) kl_coeff *= 0.5;
    return m;
  }
};

std::vector<IterationMetrics> run(Trainer& trainer, const IterationCallback& on_iteration) {
  nn::AdamState adam_policy(nn::AdamConfig{.lr = trainer.config.lr});
  nn::AdamState adam_joint(nn::AdamConfig{.lr = trainer.config.lr});
  std::vector<IterationMetrics> metrics;
  for (std::size_t it = 0; it < trainer.config.iterations; ++it) {
    metrics.push_back(trainer.iterate(it, adam_policy, adam_joint));
    if (trainer.comm) trainer.comm->window().end_iteration();
    if (on_iteration) on_iteration(metrics.back());
  }
  return metrics;
}

}  // namespace

TrainArmResult train_arm(Sampler& sampler, ArmId arm, const TrainConfig& config, const comms::CommConfig& comm,
                         std::shared_ptr<const pisa::SetAutoencoderParams> encoder, std::uint64_t seed,
                         const IterationCallback& on_iteration) {
  config.validate();
  if (arm != ArmId::no_comms && !encoder)
    throw ConfigError(std::string("arm ") + std::string(to_string(arm)) + " needs a pre-trained encoder checkpoint");
  const std::size_t latent_dim = encoder ? encoder->latent_dim() : config.latent_dim;
  if (encoder && encoder->element_dim() != sampler.observation_dim())
    throw ConfigError("encoder element width does not match the observation width");

  Rng init(derive_seed(seed, 1));
  Trainer trainer{config,
                  arm,
                  make_policy(latent_dim + sampler.observation_dim(), 2, config.hidden, config.initial_log_std, init),
                  nullptr,
                  nullptr,
                  latent_dim,
                  sampler,
                  Rng(derive_seed(seed, 3)),
                  config.kl_coeff};
  if (arm != ArmId::no_comms) trainer.comm = std::make_unique<comms::CommLayer>(comm, encoder);

  TrainArmResult result;
  result.encoder_checksum_before = encoder ? checksum(*encoder) : 0;
  result.metrics = run(trainer, on_iteration);
  result.encoder_checksum_after = encoder ? checksum(*encoder) : 0;
  if (result.encoder_checksum_before != result.encoder_checksum_after)
    throw UsageError("frozen encoder changed during policy training");
  result.policy = std::move(trainer.policy);
  return result;
}

TrainArmResult train_arm(const world::EnvConfig& env, world::TaskId task, ArmId arm, const TrainConfig& config,
                         const comms::CommConfig& comm, std::shared_ptr<const pisa::SetAutoencoderParams> encoder,
                         std::uint64_t seed, const IterationCallback& on_iteration) {
  config.validate();
  env.validate();
  Sampler sampler(env, task, config.num_envs(), derive_seed(seed, 2), config.noise_agent, config.workers);
  return train_arm(sampler, arm, config, comm, std::move(encoder), seed, on_iteration);
}

SourceTrainingResult train_task_specific_source(const world::EnvConfig& env, world::TaskId source_task,
                                                const TrainConfig& config, const comms::CommConfig& comm,
                                                pisa::SetAutoencoderParams initial_encoder, std::uint64_t seed,
                                                const IterationCallback& on_iteration) {
  config.validate();
  env.validate();
  if (initial_encoder.element_dim() != env.observation_dim())
    throw ConfigError("encoder element width does not match the observation width");
  auto encoder = std::make_shared<pisa::SetAutoencoderParams>(std::move(initial_encoder));
  const std::size_t latent_dim = encoder->latent_dim();

  Sampler sampler(env, source_task, config.num_envs(), derive_seed(seed, 2), config.noise_agent, config.workers);
  Rng init(derive_seed(seed, 1));
  Trainer trainer{config,
                  ArmId::task_specific,
                  make_policy(latent_dim + env.observation_dim(), 2, config.hidden, config.initial_log_std, init),
                  encoder.get(),
                  std::make_unique<comms::CommLayer>(comm, encoder),
                  latent_dim,
                  sampler,
                  Rng(derive_seed(seed, 3)),
                  config.kl_coeff};

  SourceTrainingResult result;
  result.metrics = run(trainer, on_iteration);
  trainer.comm.reset();
  result.encoder = std::move(*encoder);
  return result;
}

double evaluate(const PolicyParams& params, const world::EnvConfig& env, world::TaskId task, ArmId arm,
                const comms::CommConfig& comm, std::shared_ptr<const pisa::SetAutoencoderParams> encoder,
                std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("evaluate: episodes must be positive");
  if (arm != ArmId::no_comms && !encoder)
    throw ConfigError(std::string("arm ") + std::string(to_string(arm)) + " needs a pre-trained encoder checkpoint");
  if (params.input_dim() < env.observation_dim()) throw ConfigError("evaluate: policy input width mismatch");
  std::unique_ptr<comms::CommLayer> layer;
  if (arm != ArmId::no_comms) layer = std::make_unique<comms::CommLayer>(comm, encoder);

  LatentSource src;
  src.arm = arm;
  src.comm = layer.get();
  src.latent_dim = params.input_dim() - env.observation_dim();
  src.record_reconstruction = false;

  Sampler sampler(env, task, episodes, derive_seed(seed, 4));
  const auto batch = sampler.collect(params, src, env.episode_length, true);
  std::vector<double> first(episodes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < batch.episode_returns.size(); ++k) {
    double& slot = first[batch.episode_envs[k]];
    if (std::isnan(slot)) slot = batch.episode_returns[k];
  }
  return stats::mean(first);
}

EvalSummary summarize(std::span<const double> per_seed_means) {
  EvalSummary s;
  s.per_seed_means.assign(per_seed_means.begin(), per_seed_means.end());
  s.interval = stats::central_95(per_seed_means);
  return s;
}

}  // namespace agnocomm::ippo
