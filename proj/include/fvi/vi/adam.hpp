#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "fvi/numcore/error.hpp"

namespace fvi::vi {

/// Moment accumulators for bias-corrected Adam. Groups are lazily sized on the
/// first update and must keep their shapes afterwards.
struct AdamState {
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One descent step: theta -= lr * m_hat / (sqrt(v_hat) + eps) for every group.
inline void adam_update(AdamState& state, std::span<const std::span<double>> params,
                        std::span<const std::span<const double>> grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam: group count mismatch");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.size(), 0.0);
      state.second.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw DimensionError("adam: group count changed");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t g = 0; g < params.size(); ++g) {
    auto p = params[g];
    auto d = grads[g];
    auto& m = state.first[g];
    auto& v = state.second[g];
    if (p.size() != d.size() || p.size() != m.size())
      throw DimensionError("adam: group " + std::to_string(g) + " shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * d[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * d[i] * d[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
    }
  }
}

}  // namespace fvi::vi
