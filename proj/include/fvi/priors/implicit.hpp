#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"
#include "fvi/numcore/rng.hpp"

namespace fvi::priors {

enum class PiecewiseFamily { kConstant, kLinear };

/// Distribution over piecewise functions on a 1-D interval: n ~ Poisson(rate)
/// changepoints placed uniformly, piece values uniform on the value range.
struct ImplicitPriorSpec {
  PiecewiseFamily family = PiecewiseFamily::kConstant;
  double changepoint_rate = 3.0;
  double domain_lo = 0.0;
  double domain_hi = 1.0;
  double value_lo = 0.0;
  double value_hi = 1.0;

  void validate() const {
    if (!(changepoint_rate > 0.0)) throw DomainError("implicit prior: rate must be positive");
    if (!(domain_hi > domain_lo)) throw DomainError("implicit prior: degenerate domain");
    if (!(value_hi > value_lo)) throw DomainError("implicit prior: degenerate value range");
  }
};

/// One sampled function. Constant pieces are right-continuous: at a
/// changepoint the function already takes the next piece's value. Linear
/// pieces interpolate between knots {domain_lo, changepoints..., domain_hi},
/// with the value at domain_hi pinned to 0.
struct PiecewiseFunction {
  PiecewiseFamily family = PiecewiseFamily::kConstant;
  double domain_lo = 0.0;
  double domain_hi = 1.0;
  std::vector<double> changepoints;  // sorted
  std::vector<double> values;        // changepoints.size() + 1

  double operator()(double x) const {
    const auto upper = std::upper_bound(changepoints.begin(), changepoints.end(), x);
    const std::size_t piece = static_cast<std::size_t>(upper - changepoints.begin());
    if (family == PiecewiseFamily::kConstant) return values[piece];
    if (x >= domain_hi) return 0.0;
    const double left = piece == 0 ? domain_lo : changepoints[piece - 1];
    const double right = piece < changepoints.size() ? changepoints[piece] : domain_hi;
    const double v_left = values[piece];
    const double v_right = piece + 1 < values.size() ? values[piece + 1] : 0.0;
    if (right <= left) return v_left;
    return v_left + (x - left) / (right - left) * (v_right - v_left);
  }

  std::size_t changepoint_count() const { return changepoints.size(); }
};

/// Draws a function with exactly `count` changepoints.
inline PiecewiseFunction sample_piecewise_with_count(const ImplicitPriorSpec& spec, std::size_t count,
                                                     Rng& rng) {
  spec.validate();
  PiecewiseFunction f{spec.family, spec.domain_lo, spec.domain_hi, {}, {}};
  f.changepoints.resize(count);
  for (auto& c : f.changepoints) c = rng.uniform(spec.domain_lo, spec.domain_hi);
  std::sort(f.changepoints.begin(), f.changepoints.end());
  f.values.resize(count + 1);
  for (auto& v : f.values) v = rng.uniform(spec.value_lo, spec.value_hi);
  return f;
}

inline PiecewiseFunction sample_piecewise(const ImplicitPriorSpec& spec, Rng& rng) {
  spec.validate();
  std::poisson_distribution<int> poisson(spec.changepoint_rate);
  const int n = poisson(rng);
  return sample_piecewise_with_count(spec, static_cast<std::size_t>(n), rng);
}

/// count x n matrix of independent function draws evaluated at the rows of x (n x 1).
inline Matrix implicit_prior_draws(const ImplicitPriorSpec& spec, const Matrix& x, std::size_t count,
                                   Rng& rng) {
  spec.validate();
  if (x.cols() != 1) throw DimensionError("implicit_prior_draws: inputs must be one-dimensional");
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (x(i, 0) < spec.domain_lo || x(i, 0) > spec.domain_hi)
      throw DomainError("implicit_prior_draws: input " + std::to_string(x(i, 0)) +
                        " outside the prior's domain");
  Matrix out(static_cast<Eigen::Index>(count), x.rows());
  for (Eigen::Index s = 0; s < out.rows(); ++s) {
    const PiecewiseFunction f = sample_piecewise(spec, rng);
    for (Eigen::Index i = 0; i < x.rows(); ++i) out(s, i) = f(x(i, 0));
  }
  return out;
}

}  // namespace fvi::priors
