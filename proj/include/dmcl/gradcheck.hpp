#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace dmcl {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool within(double tolerance) const { return max_relative_error < tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Central differences of `loss(params)` at the given coordinates, compared
// against `analytic`. `params` is perturbed in place and restored.
template <typename LossFn>
GradCheckResult finite_diff_check(LossFn&& loss, std::span<double> params, std::span<const double> analytic,
                                  std::span<const std::size_t> coordinates, double step = 1e-5) {
  GradCheckResult result;
  for (std::size_t idx : coordinates) {
    const double saved = params[idx];
    params[idx] = saved + step;
    const double up = loss(params);
    params[idx] = saved - step;
    const double down = loss(params);
    params[idx] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double err = relative_error(analytic[idx], numeric);
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = idx;
      result.worst_analytic = analytic[idx];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace dmcl
