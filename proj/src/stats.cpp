#include <agnocomm/stats.hpp>

#include <agnocomm/common.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace agnocomm::stats {

double mean(std::span<const double> xs) {
  if (xs.empty()) throw ConfigError("mean of an empty sequence");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double finite_mean(std::span<const double> xs) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : xs) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

double population_std(std::span<const double> xs) {
  const double m = mean(xs);
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return std::sqrt(v / static_cast<double>(xs.size()));
}

double percentile(std::span<const double> xs, double q) {
  if (xs.empty()) throw ConfigError("percentile of an empty sequence");
  if (q < 0.0 || q > 100.0) throw ConfigError("percentile must be in [0, 100]");
  std::vector<double> sorted(xs.begin(), xs.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Interval central_95(std::span<const double> xs) {
  return {mean(xs), percentile(xs, 2.5), percentile(xs, 97.5)};
}

double final_decile_mean(std::span<const double> xs) {
  if (xs.empty()) throw ConfigError("final_decile_mean of an empty sequence");
  const std::size_t k = (xs.size() + 9) / 10;
  return finite_mean(xs.last(k));
}

}  // namespace agnocomm::stats
