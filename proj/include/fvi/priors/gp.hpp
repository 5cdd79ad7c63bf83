#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"
#include "fvi/numcore/rng.hpp"
#include "fvi/priors/kernel.hpp"
#include "fvi/vi/adam.hpp"

namespace fvi::priors {

/// Zero-or-constant-mean GP over function values. `jitter` is the variance of
/// the Gaussian noise injected on function values, so marginals use K + jitter*I.
struct GpPrior {
  KernelSpec kernel;
  double mean = 0.0;
  double jitter = 0.0;

  /// jitter = 1e-6 times the kernel's total variance.
  static GpPrior with_default_jitter(KernelSpec kernel, double mean = 0.0) {
    const double j = 1e-6 * kernel.total_variance();
    return GpPrior{std::move(kernel), mean, j};
  }
};

struct GpPosterior {
  Vector mean;
  Matrix covariance;
};

struct GaussianScore {
  Vector log_density;  // one per row of f
  Matrix score;        // same shape as f
};

struct MarginalLikelihood {
  double value = 0.0;
  Vector gradient;  // d/d log-hyperparameters, then d/d log obs_variance
};

struct GpFit {
  KernelSpec kernel;
  double obs_variance = 0.0;
  std::vector<double> trace;
};

inline Matrix prior_covariance(const GpPrior& prior, const Matrix& x) {
  if (prior.jitter < 0.0) throw DomainError("GpPrior: negative jitter");
  Matrix k = kernel_eval(prior.kernel, x);
  k.diagonal().array() += prior.jitter;
  return k;
}

/// Rows are independent draws m + L eps with L L^T = K + jitter*I.
inline Matrix gp_sample(const GpPrior& prior, const Matrix& x, std::size_t count, Rng& rng) {
  if (x.rows() < 1) throw PreconditionError("gp_sample: need at least one input");
  const CholeskyFactor f = cholesky(prior_covariance(prior, x));
  const Matrix eps = standard_normal(static_cast<Eigen::Index>(count), x.rows(), rng);
  Matrix out = eps * f.L.transpose();
  out.array() += prior.mean;
  return out;
}

/// Log-density of N(mean, cov) for each row of f, and its gradient -cov^{-1}(f - mean).
inline GaussianScore gaussian_score(const Matrix& cov, double mean, const Matrix& f) {
  if (f.cols() != cov.rows()) throw DimensionError("gaussian_score: value dimension mismatch");
  const CholeskyFactor fac = cholesky(cov);
  const Matrix centered = (f.array() - mean).matrix();
  const Matrix solved = chol_solve(fac, Matrix(centered.transpose()));  // n x k
  const double n = static_cast<double>(cov.rows());
  const double norm = -0.5 * (n * std::log(2.0 * std::numbers::pi) + fac.log_det());
  GaussianScore out;
  out.log_density.resize(f.rows());
  for (Eigen::Index r = 0; r < f.rows(); ++r)
    out.log_density(r) = norm - 0.5 * centered.row(r).dot(solved.col(r));
  out.score = -solved.transpose();
  return out;
}

inline GaussianScore gp_score(const GpPrior& prior, const Matrix& x, const Matrix& f) {
  return gaussian_score(prior_covariance(prior, x), prior.mean, f);
}

/// log N(y; 0, K + obs_variance*I) and its gradient in log-hyperparameters.
inline MarginalLikelihood gp_log_marginal_likelihood(const KernelSpec& kernel, const Matrix& x,
                                                     const Vector& y, double obs_variance) {
  if (!(obs_variance > 0.0)) throw DomainError("marginal likelihood: obs_variance must be positive");
  if (y.size() != x.rows()) throw DimensionError("marginal likelihood: target count mismatch");
  const Eigen::Index n = x.rows();
  Matrix c = kernel_eval(kernel, x);
  c.diagonal().array() += obs_variance;
  const CholeskyFactor fac = cholesky(c);
  const Vector alpha = chol_solve(fac, y);
  MarginalLikelihood out;
  out.value = -0.5 * y.dot(alpha) - 0.5 * fac.log_det() -
              0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  const Matrix w = alpha * alpha.transpose() - chol_solve(fac, Matrix(Matrix::Identity(n, n)));
  const auto grads = kernel_gradients(kernel, x);
  out.gradient.resize(static_cast<Eigen::Index>(grads.size()) + 1);
  for (std::size_t i = 0; i < grads.size(); ++i)
    out.gradient(static_cast<Eigen::Index>(i)) = 0.5 * w.cwiseProduct(grads[i]).sum();
  out.gradient(out.gradient.size() - 1) = 0.5 * obs_variance * w.trace();
  return out;
}

/// Adam ascent on the log marginal likelihood over log-hyperparameters and
/// log obs_variance (held at obs_init unless fit_obs). trace[i] is the
/// objective before update i.
inline GpFit fit_gp_hypers(const Matrix& x, const Vector& y, const KernelSpec& init,
                           double obs_init, std::size_t iterations = 2000,
                           double learning_rate = 0.01, bool fit_obs = true) {
  if (x.rows() < 1) throw PreconditionError("fit_gp_hypers: empty dataset");
  std::vector<double> theta = init.log_params();
  theta.push_back(std::log(obs_init));
  vi::AdamState adam;
  GpFit fit{init, obs_init, {}};
  fit.trace.reserve(iterations);
  std::vector<double> grad(theta.size());
  for (std::size_t it = 0; it < iterations; ++it) {
    const KernelSpec k = init.with_log_params(std::span<const double>(theta.data(), theta.size() - 1));
    MarginalLikelihood ml;
    try {
      ml = gp_log_marginal_likelihood(k, x, y, std::exp(theta.back()));
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("fit_gp_hypers: ") + e.what(), e.last_jitter(), it);
    }
    if (!std::isfinite(ml.value) || !ml.gradient.allFinite())
      throw NumericalError("fit_gp_hypers: objective diverged", 0.0, it);
    fit.trace.push_back(ml.value);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = -ml.gradient(static_cast<Eigen::Index>(i));
    if (!fit_obs) grad.back() = 0.0;
    const std::span<double> p(theta);
    const std::span<const double> g(grad);
    vi::adam_update(adam, std::span<const std::span<double>>(&p, 1),
                    std::span<const std::span<const double>>(&g, 1), learning_rate);
  }
  fit.kernel = init.with_log_params(std::span<const double>(theta.data(), theta.size() - 1));
  fit.obs_variance = std::exp(theta.back());
  return fit;
}

/// Conjugate GP regression at `query` given noisy observations (x_data, y).
inline GpPosterior gp_exact_posterior(const GpPrior& prior, const Matrix& x_data, const Vector& y,
                                      double obs_variance, const Matrix& query) {
  if (!(obs_variance > 0.0)) throw DomainError("gp_exact_posterior: obs_variance must be positive");
  GpPosterior post;
  post.covariance = kernel_eval(prior.kernel, query);
  post.mean = Vector::Constant(query.rows(), prior.mean);
  if (x_data.rows() == 0) return post;
  if (y.size() != x_data.rows()) throw DimensionError("gp_exact_posterior: target count mismatch");
  Matrix c = kernel_eval(prior.kernel, x_data);
  c.diagonal().array() += obs_variance;
  const CholeskyFactor fac = cholesky(c);
  const Matrix k_dq = kernel_eval(prior.kernel, x_data, query);
  const Vector alpha = chol_solve(fac, Vector((y.array() - prior.mean).matrix()));
  post.mean += k_dq.transpose() * alpha;
  const Matrix v = fac.L.triangularView<Eigen::Lower>().solve(k_dq);
  post.covariance -= v.transpose() * v;
  post.covariance = 0.5 * (post.covariance + post.covariance.transpose());
  return post;
}

}  // namespace fvi::priors
