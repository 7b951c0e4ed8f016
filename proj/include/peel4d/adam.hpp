#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "peel4d/errors.hpp"

namespace peel4d {

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers for one parameter tensor.
template <class T>
struct AdamState {
  std::vector<T> m, v;
  std::int64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

// One bias-corrected Adam update of `params` in place.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ConfigError("adam_step: parameter, gradient and state sizes differ");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T step_size = T(cfg.lr / bc1);
  const T inv_bc2 = T(1.0 / bc2);
  const T eps = T(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i] * inv_bc2) + eps);
  }
}

}  // namespace peel4d
