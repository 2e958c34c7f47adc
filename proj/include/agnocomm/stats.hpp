#pragma once

#include <span>
#include <vector>

namespace agnocomm::stats {

double mean(std::span<const double> xs);
// Mean over the finite entries only; NaN if there are none.
double finite_mean(std::span<const double> xs);
double population_std(std::span<const double> xs);
// Linear interpolation between closest ranks (numpy's default); q in [0, 100].
double percentile(std::span<const double> xs, double q);

struct Interval {
  double mean = 0.0;
  double lower = 0.0;  // 2.5th percentile
  double upper = 0.0;  // 97.5th percentile
};

Interval central_95(std::span<const double> xs);

// Mean of the finite entries among the last ceil(n / 10).
double final_decile_mean(std::span<const double> xs);

}  // namespace agnocomm::stats
