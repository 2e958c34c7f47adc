#include <agnocomm/ood.hpp>

#include <json.hpp>

#include <fstream>

namespace agnocomm::ood {

std::string_view to_string(Flag f) {
  return f == Flag::out_of_distribution ? "out_of_distribution" : "in_distribution";
}

OodCalibration calibrate(double loss_mean, double loss_std, std::size_t window) {
  if (window == 0) throw ConfigError("OOD calibration needs a non-empty window");
  if (loss_std < 0) throw ConfigError("OOD calibration: negative standard deviation");
  return {loss_mean, loss_std, loss_mean + 3.0 * loss_std, window};
}

OodCalibration fit_threshold(const pretrain::PretrainReport& report) {
  return calibrate(report.loss_mean, report.loss_std, report.window);
}

OodCalibration fit_threshold(std::span<const pisa::LossBreakdown> trace, double window_fraction) {
  const auto w = pretrain::trailing_window_stats(trace, window_fraction);
  return calibrate(w.mean, w.std, w.window);
}

OodVerdict assess(std::span<const double> window_losses, const OodCalibration& calibration) {
  if (window_losses.empty()) throw ConfigError("assess: empty loss window");
  double sum = 0.0;
  for (double l : window_losses) sum += l;
  OodVerdict v;
  v.window_mean_loss = sum / static_cast<double>(window_losses.size());
  v.threshold = calibration.threshold;
  v.flag = v.window_mean_loss > calibration.threshold ? Flag::out_of_distribution : Flag::in_distribution;
  return v;
}

pisa::ObservationSet inject_noise_observation(const pisa::ObservationSet& joint, std::size_t agent, Rng& rng) {
  if (agent >= joint.size()) throw ConfigError("inject_noise_observation: agent index out of range");
  pisa::ObservationSet out = joint;
  auto col = out.elements().col(static_cast<Eigen::Index>(agent));
  for (Eigen::Index k = 0; k < col.size(); ++k) col[k] = standard_normal(rng);
  return out;
}

void save_calibration(const OodCalibration& c, const std::filesystem::path& path) {
  nlohmann::json j;
  j["loss_mean"] = c.loss_mean;
  j["loss_std"] = c.loss_std;
  j["threshold"] = c.threshold;
  j["window"] = c.window;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write calibration '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

OodCalibration load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing calibration file '" + path.string() + "'");
  try {
    const auto j = nlohmann::json::parse(in);
    OodCalibration c;
    c.loss_mean = j.at("loss_mean").get<double>();
    c.loss_std = j.at("loss_std").get<double>();
    c.threshold = j.at("threshold").get<double>();
    c.window = j.at("window").get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed calibration '" + path.string() + "': " + e.what());
  }
}

}  // namespace agnocomm::ood
