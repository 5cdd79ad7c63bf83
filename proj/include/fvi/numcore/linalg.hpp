#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fvi/numcore/error.hpp"

namespace fvi {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Lower factor of (A + jitter_used * I).
struct CholeskyFactor {
  Matrix L;
  double jitter_used = 0.0;

  Eigen::Index size() const { return L.rows(); }
  double log_det() const { return 2.0 * L.diagonal().array().log().sum(); }
};

struct SymEig {
  Vector values;   // descending
  Matrix vectors;  // columns are orthonormal eigenvectors
};

namespace linalg {

inline constexpr int kMaxJitterRetries = 10;
inline constexpr int kMaxJacobiSweeps = 100;
inline constexpr double kJacobiTolerance = 1e-12;
// Beyond this size the Householder/QL solver replaces cyclic Jacobi.
inline constexpr Eigen::Index kJacobiMaxSize = 200;

inline void require_symmetric(const Matrix& a, const char* op) {
  if (a.rows() != a.cols())
    throw DimensionError(std::string(op) + ": matrix is " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()));
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw PreconditionError(std::string(op) + ": matrix is not symmetric");
}

/// 1e-8 times the mean diagonal (1e-8 when the diagonal is not positive).
inline double default_jitter(const Matrix& a) {
  const double md = a.rows() ? a.diagonal().mean() : 0.0;
  return md > 0.0 ? 1e-8 * md : 1e-8;
}

/// Plain factorization without jitter; false when a pivot is not positive.
inline bool try_cholesky(const Matrix& a, double jitter, Matrix& L) {
  const Eigen::Index n = a.rows();
  L.setZero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double d = a(j, j) + jitter - L.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    L(j, j) = ljj;
    const Eigen::Index rest = n - j - 1;
    if (rest > 0)
      L.col(j).tail(rest) =
          (a.col(j).tail(rest) - L.block(j + 1, 0, rest, j) * L.row(j).head(j).transpose()) / ljj;
  }
  return true;
}

}  // namespace linalg

/// Cholesky factor of a + jitter*I. Starts at `base_jitter` (negative selects
/// 1e-8 times the mean diagonal) and doubles it on failure, at most ten times.
inline CholeskyFactor cholesky(const Matrix& a, double base_jitter = -1.0) {
  linalg::require_symmetric(a, "cholesky");
  double jitter = base_jitter < 0.0 ? linalg::default_jitter(a) : base_jitter;
  CholeskyFactor f;
  for (int attempt = 0; attempt <= linalg::kMaxJitterRetries; ++attempt) {
    if (linalg::try_cholesky(a, jitter, f.L)) {
      f.jitter_used = jitter;
      return f;
    }
    if (attempt == linalg::kMaxJitterRetries) break;
    jitter = jitter > 0.0 ? 2.0 * jitter : linalg::default_jitter(a);
  }
  throw NumericalError("cholesky: matrix not positive definite after jitter retries", jitter);
}

/// Solves (L L^T) x = b.
inline Matrix chol_solve(const CholeskyFactor& f, const Matrix& b) {
  if (b.rows() != f.L.rows())
    throw DimensionError("chol_solve: rhs has " + std::to_string(b.rows()) + " rows, factor is " +
                         std::to_string(f.L.rows()));
  Matrix y = f.L.triangularView<Eigen::Lower>().solve(b);
  return f.L.transpose().triangularView<Eigen::Upper>().solve(y);
}

inline Vector chol_solve(const CholeskyFactor& f, const Vector& b) {
  return chol_solve(f, Matrix(b)).col(0);
}

namespace linalg {

inline void jacobi_rotate(Matrix& a, Matrix& v, Eigen::Index p, Eigen::Index q) {
  const double apq = a(p, q);
  const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
  const double t = tau >= 0.0 ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                              : -1.0 / (-tau + std::sqrt(1.0 + tau * tau));
  const double c = 1.0 / std::sqrt(1.0 + t * t);
  const double s = t * c;
  const Eigen::Index n = a.rows();
  for (Eigen::Index k = 0; k < n; ++k) {
    const double akp = a(k, p), akq = a(k, q);
    a(k, p) = c * akp - s * akq;
    a(k, q) = s * akp + c * akq;
  }
  for (Eigen::Index k = 0; k < n; ++k) {
    const double apk = a(p, k), aqk = a(q, k);
    a(p, k) = c * apk - s * aqk;
    a(q, k) = s * apk + c * aqk;
  }
  a(p, q) = a(q, p) = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double vkp = v(k, p), vkq = v(k, q);
    v(k, p) = c * vkp - s * vkq;
    v(k, q) = s * vkp + c * vkq;
  }
}

inline double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

/// Cyclic Jacobi; returns unsorted eigenvalues and eigenvectors.
inline SymEig jacobi_eig(const Matrix& input) {
  Matrix a = input;
  Matrix v = Matrix::Identity(a.rows(), a.cols());
  const double threshold = kJacobiTolerance * std::max(1.0, input.norm());
  const Eigen::Index n = a.rows();
  int sweep = 0;
  while (off_diagonal_norm(a) >= threshold) {
    if (++sweep > kMaxJacobiSweeps)
      throw NumericalError("sym_eig: Jacobi did not converge", 0.0, kMaxJacobiSweeps);
    for (Eigen::Index p = 0; p + 1 < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q)
        if (a(p, q) != 0.0) jacobi_rotate(a, v, p, q);
  }
  return {a.diagonal(), v};
}

}  // namespace linalg

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending. Ties
/// keep their original column order.
inline SymEig sym_eig(const Matrix& a) {
  linalg::require_symmetric(a, "sym_eig");
  SymEig raw;
  if (a.rows() <= linalg::kJacobiMaxSize) {
    raw = linalg::jacobi_eig(0.5 * (a + a.transpose()));
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (a + a.transpose()));
    if (solver.info() != Eigen::Success) throw NumericalError("sym_eig: solver did not converge");
    raw = {solver.eigenvalues(), solver.eigenvectors()};
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(a.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) {
    return raw.values(i) > raw.values(j);
  });
  SymEig out{Vector(a.rows()), Matrix(a.rows(), a.cols())};
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    out.values(k) = raw.values(order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = raw.vectors.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

/// Standard normal draws of the given shape, row-major.
template <typename Rng>
Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = rng.normal();
  return out;
}

}  // namespace fvi
