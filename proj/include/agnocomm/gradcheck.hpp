#pragma once

#include <agnocomm/params.hpp>

#include <algorithm>
#include <cmath>
#include <functional>

namespace agnocomm::nn {

// Max over all parameters of |analytic - cd| / (|analytic| + |cd| + tiny), where
// cd is the fourth-order central difference
// (8 (f(p+h) - f(p-h)) - (f(p+2h) - f(p-2h))) / 12h.
template <class P>
double finite_diff_check(const std::function<double(const P&)>& f, const P& params,
                         const P& analytic, double h = 1e-5, double tiny = 1e-7) {
  P probe = params;
  auto probe_views = flat_views(probe);
  const auto grad_views = flat_views(analytic);
  double worst = 0.0;
  for (std::size_t t = 0; t < probe_views.size(); ++t) {
    for (std::size_t i = 0; i < probe_views[t].size(); ++i) {
      double& x = probe_views[t][i];
      const double saved = x;
      auto at = [&](double dx) {
        x = saved + dx;
        return f(probe);
      };
      const double near = at(h) - at(-h);
      const double far = at(2.0 * h) - at(-2.0 * h);
      x = saved;
      const double cd = (8.0 * near - far) / (12.0 * h);
      const double a = grad_views[t][i];
      worst = std::max(worst, std::abs(a - cd) / (std::abs(a) + std::abs(cd) + tiny));
    }
  }
  return worst;
}

}  // namespace agnocomm::nn
