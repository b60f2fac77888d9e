#pragma once

#include <cmath>
#include <cstdint>

#include "transpdt/autodiff.hpp"

namespace transpdt {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;

  AdamState() = default;
  explicit AdamState(const ParameterStore& store) {
    for (const auto& p : store) {
      first.emplace_back(p.value.shape());
      second.emplace_back(p.value.shape());
    }
  }
};

// One Adam update with bias correction. Throws NumericError naming the first
// parameter whose gradient is not finite; parameters are untouched in that case.
inline void adam_step(ParameterStore& params, const GradientSet& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.first.size() != params.size())
    throw DimensionError("adam_step: parameter, gradient and moment counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].value.shape() || state.first[k].shape() != params[k].value.shape())
      throw DimensionError("adam_step: shape mismatch for parameter " + params[k].name);
    if (!grads[k].all_finite()) throw NumericError("non-finite gradient for parameter " + params[k].name);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].value;
    auto& m = state.first[k];
    auto& v = state.second[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Rescales the whole gradient set so its global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_global_norm(GradientSet& grads, double max_norm) {
  const double norm = grads.global_norm();
  if (norm > max_norm && norm > 0.0) grads.scale(max_norm / norm);
  return norm;
}

}  // namespace transpdt
