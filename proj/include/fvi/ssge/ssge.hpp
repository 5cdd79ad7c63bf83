#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"

namespace fvi::ssge {

/// Truncation and kernel settings for the spectral Stein gradient estimator.
/// Either a fixed eigenfunction count or a cumulative eigenvalue ratio.
struct SsgeConfig {
  std::optional<std::size_t> fixed_count;
  double ratio_threshold = 0.99;
  double bandwidth_multiplier = 1.0;
  double gram_jitter = 1e-8;

  static SsgeConfig fixed(std::size_t j) {
    SsgeConfig c;
    c.fixed_count = j;
    return c;
  }

  static SsgeConfig ratio(double r) {
    SsgeConfig c;
    c.ratio_threshold = r;
    return c;
  }

  void validate() const {
    if (fixed_count && *fixed_count < 1) throw PreconditionError("ssge: fixed eigen count must be >= 1");
    if (!fixed_count && !(ratio_threshold > 0.0 && ratio_threshold <= 1.0))
      throw PreconditionError("ssge: ratio threshold must be in (0, 1]");
    if (!(bandwidth_multiplier > 0.0)) throw PreconditionError("ssge: bandwidth multiplier must be positive");
    if (gram_jitter < 0.0) throw PreconditionError("ssge: negative gram jitter");
  }
};

/// Median pairwise Euclidean distance between rows, times `multiplier`.
/// Falls back to 1.0 when every sample coincides.
inline double median_heuristic(const Matrix& samples, double multiplier = 1.0) {
  const Eigen::Index m = samples.rows();
  if (m < 2) throw PreconditionError("median_heuristic: need at least two samples");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i + 1; j < m; ++j) d.push_back((samples.row(i) - samples.row(j)).norm());
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  if (!(med > 0.0)) return 1.0;
  return med * multiplier;
}

/// Squared distances between rows of a (p x D) and b (q x D).
inline Matrix pairwise_sq_dists(const Matrix& a, const Matrix& b) {
  Matrix d = (-2.0 * a * b.transpose()).colwise() + a.rowwise().squaredNorm();
  d.rowwise() += b.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

/// Fitted Nystrom eigen-system over samples of a distribution. Estimates the
/// score grad log q at arbitrary query points as sum_j beta_j psi_j(x) with
/// beta_j = -E_q[grad psi_j], the expectation taken over the fitted samples.
class SsgeEstimator {
 public:
  static SsgeEstimator fit(const Matrix& samples, const SsgeConfig& config = {}) {
    config.validate();
    const Eigen::Index m = samples.rows();
    if (m < 2) throw PreconditionError("ssge fit: need at least two samples");

    SsgeEstimator est;
    est.samples_ = samples;
    est.bandwidth_ = median_heuristic(samples, config.bandwidth_multiplier);
    const double inv2s2 = 1.0 / (2.0 * est.bandwidth_ * est.bandwidth_);

    const Matrix k = (-inv2s2 * pairwise_sq_dists(samples, samples)).array().exp().matrix();
    Matrix gram = k;
    gram.diagonal().array() += config.gram_jitter;
    const SymEig eig = sym_eig(gram);

    Eigen::Index positive = 0;
    while (positive < m && eig.values(positive) > 1e-12) ++positive;
    if (positive == 0) throw NumericalError("ssge fit: degenerate sample set (no positive eigenvalues)");

    Eigen::Index j_count = 0;
    if (config.fixed_count) {
      j_count = static_cast<Eigen::Index>(*config.fixed_count);
    } else {
      const double total = eig.values.head(positive).sum();
      double acc = 0.0;
      while (j_count < positive) {
        acc += eig.values(j_count++);
        if (acc >= config.ratio_threshold * total) break;
      }
      j_count = std::min(j_count, m - 1);
    }
    j_count = std::clamp<Eigen::Index>(j_count, 1, positive);

    est.eigenvalues_ = eig.values.head(j_count);
    est.eigenvectors_ = eig.vectors.leftCols(j_count);

    // sum_a grad psi_j(x_a) = -(sqrt(m)/(lambda_j s^2)) [U^T (K X) - U^T diag(K 1) X]_j
    const double s2 = est.bandwidth_ * est.bandwidth_;
    const Matrix kx = k * samples;
    const Vector k1 = k.rowwise().sum();
    const Matrix weighted = est.eigenvectors_.transpose() * kx -
                            est.eigenvectors_.transpose() * (k1.asDiagonal() * samples);
    const double sqrt_m = std::sqrt(static_cast<double>(m));
    est.beta_ = weighted;
    for (Eigen::Index j = 0; j < j_count; ++j)
      est.beta_.row(j) *= sqrt_m / (static_cast<double>(m) * est.eigenvalues_(j) * s2);
    return est;
  }

  /// Nystrom eigenfunctions psi_j at the query rows (q x J).
  Matrix eigenfunctions(const Matrix& queries) const {
    check_dims(queries);
    const double inv2s2 = 1.0 / (2.0 * bandwidth_ * bandwidth_);
    const Matrix kq = (-inv2s2 * pairwise_sq_dists(queries, samples_)).array().exp().matrix();
    Matrix psi = kq * eigenvectors_;
    const double sqrt_m = std::sqrt(static_cast<double>(samples_.rows()));
    for (Eigen::Index j = 0; j < psi.cols(); ++j) psi.col(j) *= sqrt_m / eigenvalues_(j);
    return psi;
  }

  /// Estimated grad log q at each query row (q x D).
  Matrix estimate_score(const Matrix& queries) const { return eigenfunctions(queries) * beta_; }

  double bandwidth() const noexcept { return bandwidth_; }
  Eigen::Index eigen_count() const noexcept { return eigenvalues_.size(); }
  const Vector& eigenvalues() const noexcept { return eigenvalues_; }
  const Matrix& coefficients() const noexcept { return beta_; }
  Eigen::Index sample_count() const noexcept { return samples_.rows(); }
  Eigen::Index dimension() const noexcept { return samples_.cols(); }

 private:
  void check_dims(const Matrix& queries) const {
    if (queries.cols() != samples_.cols())
      throw DimensionError("ssge: query dimension " + std::to_string(queries.cols()) +
                           " does not match sample dimension " + std::to_string(samples_.cols()));
  }

  Matrix samples_;
  double bandwidth_ = 1.0;
  Vector eigenvalues_;
  Matrix eigenvectors_;
  Matrix beta_;
};

}  // namespace fvi::ssge
