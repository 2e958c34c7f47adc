#include <agnocomm/cli.hpp>
#include <agnocomm/csv.hpp>
#include <agnocomm/ood.hpp>
#include <agnocomm/stats.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

extern char** environ;

#ifndef AGNOCOMM_VERSION
#define AGNOCOMM_VERSION "0.0.0"
#endif

namespace agnocomm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TypeMismatch {
  std::string expected;
};

template <class T>
struct Codec;

template <std::unsigned_integral T>
struct Codec<T> {
  static T from(const json& j) {
    if (j.is_number_unsigned()) return j.get<T>();
    if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<T>(j.get<std::int64_t>());
    throw TypeMismatch{"a non-negative integer"};
  }
  static json to(T v) { return v; }
};

template <>
struct Codec<double> {
  static double from(const json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
      const auto s = j.get<std::string>();
      if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    }
    throw TypeMismatch{"a number"};
  }
  static json to(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
  }
};

template <>
struct Codec<bool> {
  static bool from(const json& j) {
    if (!j.is_boolean()) throw TypeMismatch{"true or false"};
    return j.get<bool>();
  }
  static json to(bool v) { return v; }
};

template <>
struct Codec<std::string> {
  static std::string from(const json& j) {
    if (!j.is_string()) throw TypeMismatch{"a string"};
    return j.get<std::string>();
  }
  static json to(const std::string& v) { return v; }
};

template <>
struct Codec<fs::path> {
  static fs::path from(const json& j) { return Codec<std::string>::from(j); }
  static json to(const fs::path& v) { return v.string(); }
};

template <>
struct Codec<world::TaskId> {
  static world::TaskId from(const json& j) {
    try {
      return world::parse_task(Codec<std::string>::from(j));
    } catch (const ConfigError&) {
      throw TypeMismatch{"one of discovery, flocking, pursuit_evasion"};
    }
  }
  static json to(world::TaskId v) { return std::string(world::to_string(v)); }
};

template <>
struct Codec<ippo::ArmId> {
  static ippo::ArmId from(const json& j) {
    try {
      return ippo::parse_arm(Codec<std::string>::from(j));
    } catch (const ConfigError&) {
      throw TypeMismatch{"one of task_agnostic, task_specific, no_comms"};
    }
  }
  static json to(ippo::ArmId v) { return std::string(ippo::to_string(v)); }
};

template <class T>
struct Codec<std::vector<T>> {
  static std::vector<T> from(const json& j) {
    if (!j.is_array()) throw TypeMismatch{"a list"};
    std::vector<T> out;
    for (const auto& e : j) out.push_back(Codec<T>::from(e));
    return out;
  }
  static json to(const std::vector<T>& v) {
    json a = json::array();
    for (const auto& e : v) a.push_back(Codec<T>::to(e));
    return a;
  }
};

template <class T>
struct Codec<std::optional<T>> {
  static std::optional<T> from(const json& j) {
    if (j.is_null()) return std::nullopt;
    return Codec<T>::from(j);
  }
  static json to(const std::optional<T>& v) { return v ? Codec<T>::to(*v) : json(nullptr); }
};

struct Key {
  std::string name;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <class Access>
Key bind(std::string name, Access access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  return {std::move(name), [access](RunConfig& c, const json& j) { access(c) = Codec<T>::from(j); },
          [access](const RunConfig& c) { return Codec<T>::to(access(const_cast<RunConfig&>(c))); }};
}

#define KEY(name, member) bind(name, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      KEY("out", out),
      KEY("seeds", seeds),
      KEY("arm", arm),
      KEY("task", task),
      KEY("encoder_dir", encoder_dir),

      KEY("env.n_agents", env.n_agents),
      KEY("env.arena_half_width", env.arena_half_width),
      KEY("env.dt", env.dt),
      KEY("env.max_speed", env.max_speed),
      KEY("env.drag", env.drag),
      KEY("env.n_lidar_rays", env.n_lidar_rays),
      KEY("env.lidar_range", env.lidar_range),
      KEY("env.n_targets", env.n_targets),
      KEY("env.discovery_radius", env.discovery_radius),
      KEY("env.agents_per_target", env.agents_per_target),
      KEY("env.episode_length", env.episode_length),
      KEY("env.agent_radius", env.agent_radius),
      KEY("env.target_radius", env.target_radius),
      KEY("env.contact_distance", env.contact_distance),
      KEY("env.collision_penalty", env.collision_penalty),
      KEY("env.lead_speed", env.lead_speed),
      KEY("env.evader_speed", env.evader_speed),

      KEY("comm.epsilon", comm.epsilon),

      KEY("autoencoder.latent_dim", autoencoder.latent_dim),
      KEY("autoencoder.key_dim", autoencoder.key_dim),
      KEY("autoencoder.hidden_dim", autoencoder.hidden_dim),
      KEY("autoencoder.max_cardinality", autoencoder.max_cardinality),

      KEY("train.gamma", train.gamma),
      KEY("train.gae_lambda", train.gae_lambda),
      KEY("train.clip", train.clip),
      KEY("train.lr", train.lr),
      KEY("train.kl_coeff", train.kl_coeff),
      KEY("train.kl_target", train.kl_target),
      KEY("train.entropy_coeff", train.entropy_coeff),
      KEY("train.vf_coeff", train.vf_coeff),
      KEY("train.train_batch", train.train_batch),
      KEY("train.minibatch", train.minibatch),
      KEY("train.sgd_epochs", train.sgd_epochs),
      KEY("train.iterations", train.iterations),
      KEY("train.rollout_fragment", train.rollout_fragment),
      KEY("train.hidden", train.hidden),
      KEY("train.latent_dim", train.latent_dim),
      KEY("train.initial_log_std", train.initial_log_std),
      KEY("train.workers", train.workers),
      KEY("train.noise_agent", train.noise_agent),
      KEY("train.record_reconstruction", train.record_reconstruction),

      KEY("collect.mode", collect_mode),
      KEY("collect.samples", collect_samples),
      KEY("collect.agent_counts", collect_agent_counts),
      KEY("collect.task", collect_task),

      KEY("pretrain.objective", pretrain_objective),
      KEY("pretrain.dataset", pretrain_dataset),
      KEY("pretrain.iterations", pretrain_training.iterations),
      KEY("pretrain.batch_size", pretrain_training.batch_size),
      KEY("pretrain.learning_rate", pretrain_training.learning_rate),
      KEY("pretrain.final_lr_fraction", pretrain_training.final_lr_fraction),
      KEY("pretrain.window_fraction", pretrain_window_fraction),
      KEY("pretrain.source_task", pretrain_source_task),

      KEY("eval.episodes", eval_episodes),

      KEY("ood.mode", ood_mode),
      KEY("ood.window", ood_window),
      KEY("ood.iterations", ood_iterations),
      KEY("ood.noise_agent", ood_noise_agent),
      KEY("ood.calibration", ood_calibration),
  };
  return k;
}

#undef KEY

std::string env_name(const std::string& key) {
  std::string out = "AGNOCOMM_";
  for (char ch : key) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  for (const auto& [k, v] : j.items()) {
    const auto name = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten(v, name, out);
    else
      out[name] = v;
  }
}

// Environment values are JSON when they parse as JSON, plain strings otherwise.
json parse_env_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

void validate(const RunConfig& c) {
  c.env.validate();
  c.train.validate();
  if (c.seeds.empty()) throw ConfigError("config key 'seeds': must not be empty");
  if (c.collect_mode != "random_policy" && c.collect_mode != "random_observation_sampling")
    throw ConfigError("config key 'collect.mode': expected random_policy or random_observation_sampling");
  if (c.collect_agent_counts.empty()) throw ConfigError("config key 'collect.agent_counts': must not be empty");
  for (auto n : c.collect_agent_counts)
    if (n == 0 || n > c.autoencoder.max_cardinality)
      throw ConfigError("config key 'collect.agent_counts': counts must lie in 1..autoencoder.max_cardinality");
  if (c.pretrain_objective != "reconstruction" && c.pretrain_objective != "rl")
    throw ConfigError("config key 'pretrain.objective': expected reconstruction or rl");
  if (c.ood_mode != "run" && c.ood_mode != "live") throw ConfigError("config key 'ood.mode': expected run or live");
  if (c.ood_window == 0) throw ConfigError("config key 'ood.window': must be positive");
  if (c.eval_episodes == 0) throw ConfigError("config key 'eval.episodes': must be positive");
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw ConfigError("cannot write " + p.string());
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---- run directory ----

class Stage {
 public:
  Stage(const RunConfig& config, std::string name)
      : config_(config), name_(std::move(name)), hash_(config_hash(config)), started_(utc_now()) {}

  fs::path manifest_path() const { return config_.out / ("manifest_" + name_ + ".json"); }

  // Returns the stored manifest when this stage already completed for this
  // configuration. Throws if the directory belongs to a different one.
  std::optional<json> open() {
    fs::create_directories(config_.out);
    const auto snapshot = config_.out / "config.snapshot";
    const auto text = canonical_config(config_) + "\n";
    if (fs::exists(snapshot)) {
      if (read_file(snapshot) != text)
        throw ConfigError("run directory " + config_.out.string() +
                          " holds a different configuration; refusing to overwrite (choose another --out)");
    } else {
      write_file(snapshot, text);
    }
    if (!fs::exists(manifest_path())) return std::nullopt;
    json m;
    try {
      m = json::parse(read_file(manifest_path()));
    } catch (const json::exception& e) {
      throw ConfigError("malformed " + manifest_path().string() + ": " + e.what());
    }
    if (m.value("config_hash", "") != hash_)
      throw ConfigError(manifest_path().string() + " was written for a different configuration");
    for (const auto& a : m.at("artifacts"))
      if (!fs::exists(config_.out / a.get<std::string>()))
        throw ConfigError("stage " + name_ + " is recorded complete but " + a.get<std::string>() +
                          " is missing; remove " + manifest_path().string() + " to rerun");
    return m;
  }

  void add(const fs::path& p) { artifacts_.insert(fs::relative(p, config_.out).generic_string()); }

  void finish(json extra = json::object()) {
    json m = std::move(extra);
    m["stage"] = name_;
    m["config_hash"] = hash_;
    m["version"] = std::string("agnocomm ") + AGNOCOMM_VERSION;
    m["started"] = started_;
    m["finished"] = utc_now();
    m["artifacts"] = json(std::vector<std::string>(artifacts_.begin(), artifacts_.end()));
    m["artifacts"].push_back("config.snapshot");
    write_file(manifest_path(), m.dump(2) + "\n");
  }

 private:
  const RunConfig& config_;
  std::string name_;
  std::string hash_;
  std::string started_;
  std::set<std::string> artifacts_;
};

pisa::SetAutoencoderConfig autoencoder_config(const RunConfig& c) {
  auto a = c.autoencoder;
  a.element_dim = c.env.observation_dim();
  return a;
}

std::shared_ptr<const pisa::SetAutoencoderParams> load_encoder(const RunConfig& c) {
  if (c.arm == ippo::ArmId::no_comms) return nullptr;
  const auto path = c.encoder_directory() / "encoder.agno";
  if (!fs::exists(path))
    throw ConfigError("arm " + std::string(ippo::to_string(c.arm)) + " needs encoder checkpoint " + path.string() +
                      " (config key 'encoder_dir')");
  return std::make_shared<const pisa::SetAutoencoderParams>(pisa::load(path, autoencoder_config(c)));
}

std::size_t latent_width(const RunConfig& c) {
  return c.arm == ippo::ArmId::no_comms ? c.train.latent_dim : c.autoencoder.latent_dim;
}

fs::path policy_path(const RunConfig& c, std::uint64_t seed) {
  return c.out / "checkpoints" / ("policy_seed" + std::to_string(seed) + ".agno");
}

fs::path metrics_path(const RunConfig& c, std::uint64_t seed) {
  return c.out / "metrics" / ("seed_" + std::to_string(seed) + ".csv");
}

std::optional<ood::OodCalibration> try_calibration(const RunConfig& c) {
  if (c.arm == ippo::ArmId::no_comms || !fs::exists(c.calibration_path())) return std::nullopt;
  return ood::load_calibration(c.calibration_path());
}

std::string verdict_line(std::size_t iteration, const ood::OodVerdict& v) {
  return std::to_string(iteration) + "," + format_double(v.window_mean_loss) + "," + format_double(v.threshold) + "," +
         std::string(ood::to_string(v.flag));
}

// ---- stages ----

int cmd_collect(const RunConfig& c) {
  Stage stage(c, "collect");
  if (stage.open()) {
    std::cerr << "collect: already complete in " << c.out << "\n";
    return 0;
  }
  const auto seed = c.seeds.front();
  const auto dataset =
      c.collect_mode == "random_policy"
          ? pretrain::collect_random_policy(pretrain::forage_factory(c.env, c.collect_task), c.collect_samples,
                                            c.collect_agent_counts, seed)
          : pretrain::collect_random_observations(c.env, c.collect_samples, c.collect_agent_counts, seed);
  const auto path = c.out / "dataset.agno";
  pretrain::save_dataset(dataset, path);
  stage.add(path);
  stage.finish({{"samples", dataset.samples.size()}});
  std::cerr << "collect: " << dataset.samples.size() << " sets -> " << path << "\n";
  return 0;
}

void write_iteration_metrics(const fs::path& path, const std::vector<ippo::IterationMetrics>& ms,
                             const std::optional<ood::OodCalibration>& calibration, std::size_t window) {
  CsvTable t;
  t.header = metrics_header();
  comms::LossWindow w(window);
  for (const auto& m : ms) {
    std::vector<std::string> row{std::to_string(m.iteration),       std::to_string(m.env_steps),
                                 format_double(m.mean_return),      format_double(m.return_p025),
                                 format_double(m.return_p975),      format_double(m.recon_rmse_mean),
                                 format_double(m.kl),               format_double(m.entropy),
                                 format_double(m.recon_loss_mean),  format_double(m.kl_coeff)};
    if (std::isfinite(m.recon_loss_mean)) w.record(m.recon_loss_mean);
    w.end_iteration();
    if (calibration && w.full()) {
      const auto values = w.values();
      const auto v = ood::assess(values, *calibration);
      row.push_back(format_double(v.window_mean_loss));
      row.push_back(format_double(v.threshold));
      row.push_back(std::string(ood::to_string(v.flag)));
    } else {
      row.insert(row.end(), 3, "");
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

int cmd_pretrain(const RunConfig& c) {
  Stage stage(c, "pretrain");
  if (stage.open()) {
    std::cerr << "pretrain: already complete in " << c.out << "\n";
    return 0;
  }
  const auto seed = c.seeds.front();
  const auto ae = autoencoder_config(c);
  if (c.pretrain_objective == "rl") {
    Rng init(derive_seed(seed, 11));
    auto result = ippo::train_task_specific_source(
        c.env, c.pretrain_source_task, c.train, c.comm, pisa::make_set_autoencoder(ae, init), seed,
        [](const ippo::IterationMetrics& m) {
          std::cerr << "source iter " << m.iteration << " return " << m.mean_return << "\n";
        });
    fs::create_directories(c.out / "metrics");
    const auto enc = c.out / "encoder.agno";
    pisa::save(result.encoder, enc);
    const auto metrics = c.out / "metrics" / "source.csv";
    write_iteration_metrics(metrics, result.metrics, std::nullopt, c.ood_window);
    stage.add(enc);
    stage.add(metrics);
    stage.finish({{"objective", "rl"}});
    return 0;
  }

  const auto dataset = pretrain::load_dataset(c.dataset_path());
  pretrain::PretrainOptions opts;
  opts.autoencoder = ae;
  opts.training = c.pretrain_training;
  opts.training.seed = derive_seed(seed, 1);
  opts.training.on_iteration = [n = opts.training.iterations](std::size_t it, const pisa::LossBreakdown& l) {
    if ((it + 1) % 1000 == 0 || it + 1 == n) std::cerr << "pretrain iter " << it + 1 << " loss " << l.total << "\n";
  };
  opts.window_fraction = c.pretrain_window_fraction;
  opts.init_seed = seed;
  const auto report = pretrain::pretrain(dataset, opts);
  pretrain::save_report(report, c.out);
  const auto calibration = ood::fit_threshold(report);
  ood::save_calibration(calibration, c.out / "calibration.json");
  for (const char* f : {"encoder.agno", "loss_trace.csv", "report.json", "calibration.json"}) stage.add(c.out / f);
  stage.finish({{"objective", "reconstruction"}});
  std::cerr << "pretrain: threshold " << calibration.threshold << "\n";
  return 0;
}

void write_aggregate(const fs::path& path, const std::vector<std::vector<ippo::IterationMetrics>>& runs) {
  CsvTable t;
  t.header = aggregate_header();
  std::size_t n = runs.front().size();
  for (const auto& r : runs) n = std::min(n, r.size());
  const std::vector<double ippo::IterationMetrics::*> fields = {
      &ippo::IterationMetrics::mean_return, &ippo::IterationMetrics::recon_rmse_mean,
      &ippo::IterationMetrics::recon_loss_mean, &ippo::IterationMetrics::kl, &ippo::IterationMetrics::entropy};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> row{std::to_string(runs.front()[i].iteration), std::to_string(runs.front()[i].env_steps),
                                 std::to_string(runs.size())};
    for (auto f : fields) {
      std::vector<double> xs;
      for (const auto& r : runs)
        if (std::isfinite(r[i].*f)) xs.push_back(r[i].*f);
      if (xs.empty()) {
        row.insert(row.end(), 3, "nan");
        continue;
      }
      const auto iv = stats::central_95(xs);
      row.push_back(format_double(iv.mean));
      row.push_back(format_double(iv.lower));
      row.push_back(format_double(iv.upper));
    }
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

int cmd_train(const RunConfig& c) {
  Stage stage(c, "train");
  if (stage.open()) {
    std::cerr << "train: already complete in " << c.out << "\n";
    return 0;
  }
  const auto encoder = load_encoder(c);
  const auto calibration = try_calibration(c);
  fs::create_directories(c.out / "checkpoints");
  fs::create_directories(c.out / "metrics");
  std::vector<std::vector<ippo::IterationMetrics>> runs;
  for (auto seed : c.seeds) {
    auto result = ippo::train_arm(c.env, c.task, c.arm, c.train, c.comm, encoder, seed,
                                  [seed](const ippo::IterationMetrics& m) {
                                    std::cerr << "seed " << seed << " iter " << m.iteration << " return "
                                              << m.mean_return << "\n";
                                  });
    ippo::save(result.policy, policy_path(c, seed));
    write_iteration_metrics(metrics_path(c, seed), result.metrics, calibration, c.ood_window);
    stage.add(policy_path(c, seed));
    stage.add(metrics_path(c, seed));
    runs.push_back(std::move(result.metrics));
  }
  const auto agg = c.out / "metrics" / "aggregate.csv";
  write_aggregate(agg, runs);
  stage.add(agg);
  stage.finish();
  return 0;
}

int cmd_eval(const RunConfig& c) {
  Stage stage(c, "eval");
  if (stage.open()) {
    std::cerr << "eval: already complete in " << c.out << "\n";
    return 0;
  }
  const auto encoder = load_encoder(c);
  const auto input = latent_width(c) + c.env.observation_dim();
  std::vector<double> means;
  for (auto seed : c.seeds) {
    const auto path = policy_path(c, seed);
    if (!fs::exists(path)) throw ConfigError("missing policy checkpoint " + path.string() + " (run train first)");
    const auto policy = ippo::load_policy(path, input, 2, c.train.hidden);
    means.push_back(ippo::evaluate(policy, c.env, c.task, c.arm, c.comm, encoder, c.eval_episodes, seed));
  }
  const auto summary = ippo::summarize(means);
  json j;
  j["arm"] = std::string(ippo::to_string(c.arm));
  j["task"] = std::string(world::to_string(c.task));
  j["episodes"] = c.eval_episodes;
  j["seeds"] = c.seeds;
  j["per_seed_mean_return"] = summary.per_seed_means;
  j["mean"] = summary.interval.mean;
  j["p2.5"] = summary.interval.lower;
  j["p97.5"] = summary.interval.upper;
  fs::create_directories(c.out / "eval");
  const auto path = c.out / "eval" / "summary.json";
  write_file(path, j.dump(2) + "\n");
  stage.add(path);
  stage.finish();
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_ood(const RunConfig& c) {
  Stage stage(c, "ood");
  if (const auto done = stage.open()) {
    std::cerr << "ood: already complete in " << c.out << "\n";
    for (const auto& a : done->at("artifacts")) {
      const auto p = c.out / a.get<std::string>();
      if (p.parent_path().filename() == "ood") std::cout << read_file(p);
    }
    return done->value("ood_detected", false) ? 2 : 0;
  }
  if (c.arm == ippo::ArmId::no_comms) throw ConfigError("config key 'arm': ood needs an arm with communication");
  if (!fs::exists(c.calibration_path()))
    throw ConfigError("missing calibration " + c.calibration_path().string() + " (config key 'ood.calibration')");
  const auto calibration = ood::load_calibration(c.calibration_path());
  fs::create_directories(c.out / "ood");

  bool detected = false;
  for (auto seed : c.seeds) {
    std::vector<std::string> lines;
    comms::LossWindow window(c.ood_window);
    auto emit = [&](std::size_t iteration, comms::LossWindow& w) {
      if (!w.full()) return;
      const auto values = w.values();
      const auto v = ood::assess(values, calibration);
      detected = detected || v.flag == ood::Flag::out_of_distribution;
      lines.push_back(verdict_line(iteration, v));
    };

    if (c.ood_mode == "run") {
      const auto path = metrics_path(c, seed);
      if (!fs::exists(path)) throw ConfigError("missing metrics " + path.string() + " (run train first)");
      const auto table = read_csv(path);
      for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const double loss = table.number(r, "recon_loss_mean");
        if (std::isfinite(loss)) window.record(loss);
        window.end_iteration();
        emit(static_cast<std::size_t>(table.number(r, "iteration")), window);
      }
    } else {
      const auto encoder = load_encoder(c);
      const auto input = latent_width(c) + c.env.observation_dim();
      const auto ckpt = policy_path(c, seed);
      ippo::PolicyParams policy;
      if (fs::exists(ckpt)) {
        policy = ippo::load_policy(ckpt, input, 2, c.train.hidden);
      } else {
        Rng init(derive_seed(seed, 3));
        policy = ippo::make_policy(input, 2, c.train.hidden, c.train.initial_log_std, init);
      }
      comms::CommLayer layer(c.comm, encoder, c.ood_window);
      ippo::Sampler sampler(c.env, c.task, c.train.num_envs(), derive_seed(seed, 5), c.ood_noise_agent,
                            c.train.workers);
      ippo::LatentSource src;
      src.arm = c.arm;
      src.comm = &layer;
      src.latent_dim = latent_width(c);
      src.record_reconstruction = true;
      for (std::size_t it = 0; it < c.ood_iterations; ++it) {
        sampler.collect(policy, src, c.train.rollout_fragment);
        layer.window().end_iteration();
        emit(it, layer.window());
      }
    }

    std::string text = "iteration,loss,threshold,flag\n";
    for (const auto& l : lines) text += l + "\n";
    const auto path = c.out / "ood" / ("verdicts_seed" + std::to_string(seed) + ".csv");
    write_file(path, text);
    stage.add(path);
    std::cout << text;
  }
  stage.finish({{"ood_detected", detected}, {"mode", c.ood_mode}});
  return detected ? 2 : 0;
}

}  // namespace

Environment process_environment() {
  Environment env;
  for (char** e = environ; e && *e; ++e) {
    const std::string_view kv(*e);
    if (!kv.starts_with("AGNOCOMM_")) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return env;
}

RunConfig load_config(const fs::path& path, const Environment& env, const std::vector<std::string>& required) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  if (!root.is_object()) throw ConfigError("config " + path.string() + " must be a JSON object");

  std::map<std::string, json> values;
  flatten(root, "", values);

  std::map<std::string, const Key*> by_name, by_env;
  for (const auto& k : keys()) {
    by_name[k.name] = &k;
    by_env[env_name(k.name)] = &k;
  }
  for (const auto& [name, _] : values)
    if (!by_name.count(name)) throw ConfigError("unknown config key '" + name + "'");
  for (const auto& [var, text] : env) {
    if (!var.starts_with("AGNOCOMM_")) continue;
    const auto it = by_env.find(var);
    if (it == by_env.end()) throw ConfigError("unknown config override " + var);
    values[it->second->name] = parse_env_value(text);
  }
  for (const auto& r : required)
    if (!values.count(r)) throw ConfigError("missing required config key '" + r + "' (or " + env_name(r) + ")");

  RunConfig c;
  for (const auto& [name, value] : values) {
    try {
      by_name.at(name)->set(c, value);
    } catch (const TypeMismatch& t) {
      throw ConfigError("config key '" + name + "': expected " + t.expected + ", got " + value.dump());
    }
  }
  c.autoencoder.element_dim = c.env.observation_dim();
  validate(c);
  return c;
}

std::string canonical_config(const RunConfig& config) {
  json j = json::object();
  for (const auto& k : keys()) j[k.name] = k.get(config);
  return j.dump();
}

std::string config_hash(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_config(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> metrics_header() {
  return {"iteration",      "env_steps", "mean_return", "return_p2.5",      "return_p97.5", "recon_rmse_mean", "kl",
          "entropy",        "recon_loss_mean", "kl_coeff", "window_recon_loss", "threshold",  "ood_flag"};
}

std::vector<std::string> aggregate_header() {
  std::vector<std::string> h{"iteration", "env_steps", "seeds"};
  for (const char* m : {"mean_return", "recon_rmse_mean", "recon_loss_mean", "kl", "entropy"})
    for (const char* s : {"_mean", "_p2.5", "_p97.5"}) h.push_back(std::string(m) + s);
  return h;
}

int run(int argc, char** argv, const Environment& env) {
  CLI::App app{"Task-agnostic communication for multi-agent reinforcement learning"};
  app.set_version_flag("--version", std::string("agnocomm ") + AGNOCOMM_VERSION);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  app.require_subcommand(1);
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"collect", "collect a reward-free pre-training dataset"},
      {"pretrain", "pre-train the set autoencoder and fit the OOD threshold"},
      {"train", "train policies for one arm, one run per seed"},
      {"eval", "evaluate trained policies"},
      {"ood", "emit out-of-distribution verdicts (exit 2 when detected)"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--seed", seed, "run this single seed");
    sub->add_option("--out", out, "run directory");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    std::vector<std::string> required;
    if (command == "collect") required = {"collect.samples"};
    if (command == "train" || command == "eval" || command == "ood") required = {"arm", "task"};
    auto c = load_config(config_path, env, required);
    if (seed) c.seeds = {*seed};
    if (!out.empty()) c.out = out;

    if (command == "collect") return cmd_collect(c);
    if (command == "pretrain") return cmd_pretrain(c);
    if (command == "train") return cmd_train(c);
    if (command == "eval") return cmd_eval(c);
    return cmd_ood(c);
  } catch (const std::exception& e) {
    std::cerr << "agnocomm " << command << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace agnocomm::cli
