#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fvi/numcore/tensor.hpp"

namespace fvi {

struct ParameterInit {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Builds a scalar output from parameters registered on the given tape, in
/// the order of the ParameterInit list.
using ScalarGraph = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

namespace detail {

inline double evaluate_graph(const ScalarGraph& f, std::span<const ParameterInit> params) {
  Tape tape;
  std::vector<Tensor> p;
  p.reserve(params.size());
  for (const auto& init : params) p.push_back(tape.parameter(init.name, init.shape, init.values));
  return f(tape, p).item();
}

}  // namespace detail

/// Max over all parameter entries of |analytic - central| / (|analytic| + 1e-12),
/// where `central` is the central difference with the given step.
inline double finite_diff_check(const ScalarGraph& f, std::span<const ParameterInit> params,
                                double step = 1e-4) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Tensor> p;
    for (const auto& init : params) p.push_back(tape.parameter(init.name, init.shape, init.values));
    Tensor out = f(tape, p);
    if (out.tape() == &tape) {
      tape.backward(out);
      for (const auto& t : p)
        analytic.emplace_back(t.adjoint().empty() ? std::vector<double>(t.size(), 0.0)
                                                  : std::vector<double>(t.adjoint().begin(),
                                                                        t.adjoint().end()));
    } else {
      for (const auto& t : p) analytic.emplace_back(t.size(), 0.0);
    }
  }

  std::vector<ParameterInit> work(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].values.size(); ++i) {
      const double saved = work[k].values[i];
      work[k].values[i] = saved + step;
      const double up = detail::evaluate_graph(f, work);
      work[k].values[i] = saved - step;
      const double down = detail::evaluate_graph(f, work);
      work[k].values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + 1e-12));
    }
  }
  return worst;
}

}  // namespace fvi
