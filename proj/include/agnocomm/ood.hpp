#pragma once

// Out-of-distribution alerts from set reconstruction losses: the threshold is
// the pre-training loss mean plus three standard deviations, and a trailing
// window whose mean strictly exceeds it is flagged.

#include <agnocomm/pretrain.hpp>

#include <span>
#include <string_view>

namespace agnocomm::ood {

struct OodCalibration {
  double loss_mean = 0.0;
  double loss_std = 0.0;
  double threshold = 0.0;
  std::size_t window = 0;
};

enum class Flag { in_distribution, out_of_distribution };

std::string_view to_string(Flag f);

struct OodVerdict {
  double window_mean_loss = 0.0;
  double threshold = 0.0;
  Flag flag = Flag::in_distribution;
};

OodCalibration calibrate(double loss_mean, double loss_std, std::size_t window);
// Throws ConfigError if the report has an empty window.
OodCalibration fit_threshold(const pretrain::PretrainReport& report);
// Recomputes the statistics from the stored trace.
OodCalibration fit_threshold(std::span<const pisa::LossBreakdown> trace, double window_fraction = 0.1);

// Throws ConfigError on an empty window.
OodVerdict assess(std::span<const double> window_losses, const OodCalibration& calibration);

// Replaces agent `agent`'s observation with i.i.d. standard normal noise.
pisa::ObservationSet inject_noise_observation(const pisa::ObservationSet& joint, std::size_t agent, Rng& rng);

void save_calibration(const OodCalibration& c, const std::filesystem::path& path);
OodCalibration load_calibration(const std::filesystem::path& path);

}  // namespace agnocomm::ood
