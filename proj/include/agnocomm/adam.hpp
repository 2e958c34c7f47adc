#pragma once

#include <agnocomm/params.hpp>

#include <cmath>
#include <vector>

namespace agnocomm::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

// One bias-corrected Adam update, in place. Moments are allocated on first use.
// Non-finite gradients throw NumericalError before anything is modified.
template <class P>
void adam_step(P& params, const P& grads, AdamState& state) {
  auto p = flat_views(params);
  const auto g = flat_views(grads);
  if (p.size() != g.size()) throw ConfigError("adam_step: gradient structure mismatch");
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t].size() != g[t].size()) throw ConfigError("adam_step: gradient shape mismatch");
    for (double x : g[t]) {
      if (!std::isfinite(x)) throw NumericalError("adam_step: non-finite gradient");
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& v : p) {
      state.first_moment.emplace_back(v.size(), 0.0);
      state.second_moment.emplace_back(v.size(), 0.0);
    }
  } else if (state.first_moment.size() != p.size()) {
    throw ConfigError("adam_step: optimizer state does not match parameters");
  }

  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < p.size(); ++t) {
    auto& m = state.first_moment[t];
    auto& v = state.second_moment[t];
    for (std::size_t i = 0; i < p[t].size(); ++i) {
      const double gi = g[t][i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[t][i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace agnocomm::nn
