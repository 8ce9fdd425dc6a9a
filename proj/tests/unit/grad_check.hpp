#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace crowdiv::testing {

/// Largest error of analytic vs central-difference gradients over `samples`
/// random coordinates of `params`. The error of each coordinate is
/// |a - n| / max(|a|, |n|, floor): relative for sizable gradients, absolute
/// (scaled by 1/floor) near zero.
inline double max_gradient_error(std::span<double> params, std::span<const double> analytic,
                                 const std::function<double()>& loss, int samples,
                                 std::mt19937_64& rng, double h = 1e-5, double floor = 1e-6) {
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  double worst = 0.0;
  const int n = std::min<int>(samples, static_cast<int>(params.size()));
  for (int k = 0; k < n; ++k) {
    const std::size_t i = samples >= static_cast<int>(params.size()) ? static_cast<std::size_t>(k) : pick(rng);
    const double keep = params[i];
    params[i] = keep + h;
    const double up = loss();
    params[i] = keep - h;
    const double down = loss();
    params[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) /
                       std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace crowdiv::testing
