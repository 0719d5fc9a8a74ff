#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "geolab/ad/tensor.hpp"

namespace geolab::ad {

struct GradCheckOptions {
  double h = 1e-5;
  /// Upper bound on coordinates probed per input; 0 probes all of them.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  /// Denominator floor. Deep heads carry coordinates with |grad| near 1e-9,
  /// where central-difference roundoff (~eps*|f|/h) is the same size.
  double floor = 1e-8;
};

/// Max over probed coordinates of |analytic - central difference| /
/// max(floor, |analytic| + |numeric|). `fn` must build a fresh graph from
/// the current values of `inputs` and return a scalar.
inline double grad_check(const std::function<Tensor<double>()>& fn, std::vector<Tensor<double>> inputs,
                         GradCheckOptions opt = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }
  Tensor<double> out = fn();
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    if (in.has_grad()) {
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    } else {
      analytic.emplace_back(in.size(), 0.0);
    }
  }
  std::mt19937_64 rng(opt.seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].values();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_input && coords.size() > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_input);
    }
    for (std::size_t k : coords) {
      const double saved = values[k];
      values[k] = saved + opt.h;
      const double fp = fn().item();
      values[k] = saved - opt.h;
      const double fm = fn().item();
      values[k] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[t][k];
      const double rel = std::abs(a - numeric) / std::max(opt.floor, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  for (auto& in : inputs) in.clear_grad();
  return worst;
}

}  // namespace geolab::ad
