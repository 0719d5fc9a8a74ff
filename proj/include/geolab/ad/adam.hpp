#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "geolab/ad/tensor.hpp"
#include "geolab/error.hpp"

namespace geolab::ad {

template <typename T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

/// One bias-corrected Adam update over every non-frozen parameter, then
/// clears all gradients. Moments are indexed by position in `params`, so the
/// list must be passed in the same order every step.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state) {
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i]->tensor.size(), T(0));
      state.second_moment[i].assign(params[i]->tensor.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw Error(ErrorKind::ShapeMismatch, "adam_step: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<T>& p = *params[i];
    if (!p.frozen && !p.tensor.has_grad()) {
      throw Error(ErrorKind::MissingGradient, "parameter '" + p.name + "' has no gradient");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  const T lr = static_cast<T>(state.lr), eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (!p.frozen) {
      T* w = p.tensor.values().data();
      const T* g = p.tensor.grad().data();
      T* m = state.first_moment[i].data();
      T* v = state.second_moment[i].data();
      const std::size_t n = p.tensor.size();
      for (std::size_t k = 0; k < n; ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        w[k] -= lr * (m[k] * inv_bc1) / (std::sqrt(v[k] * inv_bc2) + eps);
      }
    }
    p.tensor.clear_grad();
  }
}

template <typename T>
void adam_step(std::vector<Parameter<T>*>& params, AdamState<T>& state) {
  adam_step<T>(std::span<Parameter<T>* const>(params.data(), params.size()), state);
}

}  // namespace geolab::ad
