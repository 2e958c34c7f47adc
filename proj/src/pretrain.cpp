#include <agnocomm/pretrain.hpp>

#include <agnocomm/checkpoint.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace agnocomm::pretrain {

std::string_view to_string(Provenance p) {
  return p == Provenance::random_policy ? "random_policy" : "random_observation_sampling";
}

Provenance parse_provenance(std::string_view s) {
  if (s == "random_policy") return Provenance::random_policy;
  if (s == "random_observation_sampling") return Provenance::random_observation_sampling;
  throw ConfigError("unknown dataset provenance '" + std::string(s) + "'");
}

EnvFactory forage_factory(const world::EnvConfig& base, world::TaskId task) {
  return [base, task](std::size_t n_agents, std::uint64_t seed) -> std::unique_ptr<world::Environment> {
    world::EnvConfig c = base;
    c.n_agents = n_agents;
    c.seed = seed;
    return std::make_unique<world::ForageWorld>(c, task);
  };
}

namespace {

void check_counts(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ConfigError("pretrain: agent_counts must not be empty");
  for (auto c : counts) {
    if (c == 0) throw ConfigError("pretrain: agent counts must be positive");
  }
}

void finish(PretrainDataset& d) {
  d.min_cardinality = d.samples.empty() ? 0 : d.samples.front().size();
  d.max_cardinality = d.min_cardinality;
  for (const auto& s : d.samples) {
    d.min_cardinality = std::min(d.min_cardinality, s.size());
    d.max_cardinality = std::max(d.max_cardinality, s.size());
  }
}

}  // namespace

PretrainDataset collect_random_policy(const EnvFactory& make_env, std::size_t steps,
                                      std::span<const std::size_t> agent_counts, std::uint64_t seed) {
  if (steps == 0) throw ConfigError("collect_random_policy: steps must be positive");
  check_counts(agent_counts);
  std::vector<std::unique_ptr<world::Environment>> envs;
  std::vector<RewardFreeView> views;
  std::vector<ObservationSet> current;
  for (std::size_t k = 0; k < agent_counts.size(); ++k) {
    envs.push_back(make_env(agent_counts[k], derive_seed(seed, k)));
  }
  for (auto& e : envs) {
    views.emplace_back(*e);
    current.push_back(views.back().reset());
  }
  Rng rng(derive_seed(seed, 1000));
  PretrainDataset d;
  d.provenance = Provenance::random_policy;
  d.samples.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t k = s % views.size();
    auto& view = views[k];
    d.samples.push_back(current[k]);
    Matrix actions(2, static_cast<Eigen::Index>(view.num_agents()));
    for (Eigen::Index i = 0; i < actions.size(); ++i) actions.data()[i] = uniform(rng, -1.0, 1.0);
    auto next = view.step(actions);
    current[k] = next.done ? view.reset() : std::move(next.observations);
  }
  finish(d);
  return d;
}

PretrainDataset collect_random_observations(const world::EnvConfig& config, std::size_t samples,
                                            std::span<const std::size_t> agent_counts, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("collect_random_observations: samples must be positive");
  check_counts(agent_counts);
  Rng rng(seed);
  PretrainDataset d;
  d.provenance = Provenance::random_observation_sampling;
  d.samples.reserve(samples);
  world::EnvConfig c = config;
  for (std::size_t s = 0; s < samples; ++s) {
    c.n_agents = agent_counts[s % agent_counts.size()];
    d.samples.push_back(world::observe_all(world::sample_state(c, rng), c));
  }
  finish(d);
  return d;
}

void save_dataset(const PretrainDataset& dataset, const std::filesystem::path& path) {
  std::size_t total = 0;
  std::size_t dim = 0;
  for (const auto& s : dataset.samples) {
    total += s.size();
    if (s.size()) dim = s.dim();
  }
  Tensor cards{"cardinality", {dataset.samples.size()}, {}};
  Tensor elems{"elements", {total, dim}, {}};
  elems.values.reserve(total * dim);
  for (const auto& s : dataset.samples) {
    cards.values.push_back(static_cast<double>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto col = s.elements().col(static_cast<Eigen::Index>(i));
      elems.values.insert(elems.values.end(), col.data(), col.data() + col.size());
    }
  }
  Tensor prov{"provenance", {1}, {dataset.provenance == Provenance::random_policy ? 0.0 : 1.0}};
  const Tensor all[] = {cards, elems, prov};
  write_checkpoint(path, all);
}

PretrainDataset load_dataset(const std::filesystem::path& path) {
  const auto tensors = read_checkpoint(path);
  const auto& cards = find_tensor(tensors, "cardinality");
  const auto& elems = find_tensor(tensors, "elements");
  const auto& prov = find_tensor(tensors, "provenance");
  if (elems.dims.size() != 2 || cards.dims.size() != 1 || prov.values.size() != 1) {
    throw ConfigError("dataset '" + path.string() + "' is malformed");
  }
  const auto dim = static_cast<std::size_t>(elems.dims[1]);
  PretrainDataset d;
  d.provenance = prov.values[0] == 0.0 ? Provenance::random_policy : Provenance::random_observation_sampling;
  std::size_t row = 0;
  for (double c : cards.values) {
    const auto n = static_cast<std::size_t>(c);
    if (row + n > elems.dims[0]) throw ConfigError("dataset '" + path.string() + "' is truncated");
    Matrix m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i, ++row) {
      for (std::size_t k = 0; k < dim; ++k) {
        m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = elems.values[row * dim + k];
      }
    }
    d.samples.emplace_back(std::move(m));
  }
  finish(d);
  return d;
}

WindowStats trailing_window_stats(std::span<const pisa::LossBreakdown> trace, double fraction) {
  if (trace.empty()) throw ConfigError("trailing_window_stats: empty loss trace");
  if (!(fraction > 0.0) || fraction > 1.0) throw ConfigError("trailing window fraction must be in (0, 1]");
  WindowStats w;
  w.window = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(trace.size()))));
  w.window = std::min(w.window, trace.size());
  const auto tail = trace.last(w.window);
  for (const auto& l : tail) w.mean += l.total;
  w.mean /= static_cast<double>(w.window);
  // Pooled over every set seen in the window (equal minibatch sizes).
  double second_moment = 0.0;
  for (const auto& l : tail) second_moment += l.total_std * l.total_std + l.total * l.total;
  second_moment /= static_cast<double>(w.window);
  w.std = std::sqrt(std::max(0.0, second_moment - w.mean * w.mean));
  return w;
}

PretrainReport pretrain(const PretrainDataset& dataset, const PretrainOptions& options) {
  if (dataset.samples.empty()) throw ConfigError("pretrain: empty dataset");
  Rng rng(options.init_seed);
  auto init = pisa::make_set_autoencoder(options.autoencoder, rng);
  auto result = pisa::train(std::move(init), dataset.samples, options.training);
  const auto stats = trailing_window_stats(result.history, options.window_fraction);
  PretrainReport r;
  r.params = std::move(result.params);
  r.trace = std::move(result.history);
  r.loss_mean = stats.mean;
  r.loss_std = stats.std;
  r.window = stats.window;
  r.iterations = r.trace.size();
  r.provenance = dataset.provenance;
  return r;
}

void save_report(const PretrainReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  pisa::save(report.params, dir / "encoder.agno");
  pisa::write_loss_trace(dir / "loss_trace.csv", report.trace);
  nlohmann::json j;
  j["loss_mean"] = report.loss_mean;
  j["loss_std"] = report.loss_std;
  j["window"] = report.window;
  j["iterations"] = report.iterations;
  j["provenance"] = std::string(to_string(report.provenance));
  std::ofstream out(dir / "report.json", std::ios::trunc);
  if (!out) throw ConfigError("cannot write report to '" + dir.string() + "'");
  out << j.dump(2) << '\n';
}

PretrainReport load_report(const std::filesystem::path& dir, const pisa::SetAutoencoderConfig& autoencoder) {
  std::ifstream in(dir / "report.json");
  if (!in) throw ConfigError("missing pre-training report in '" + dir.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report.json: ") + e.what());
  }
  PretrainReport r;
  r.params = pisa::load(dir / "encoder.agno", autoencoder);
  r.trace = pisa::read_loss_trace(dir / "loss_trace.csv");
  r.loss_mean = j.at("loss_mean").get<double>();
  r.loss_std = j.at("loss_std").get<double>();
  r.window = j.at("window").get<std::size_t>();
  r.iterations = j.at("iterations").get<std::size_t>();
  r.provenance = parse_provenance(j.at("provenance").get<std::string>());
  return r;
}

}  // namespace agnocomm::pretrain
