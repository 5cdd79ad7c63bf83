#include <gtest/gtest.h>

#include <cmath>

#include "fvi/numcore/rng.hpp"
#include "fvi/ssge/ssge.hpp"

using namespace fvi;
using namespace fvi::ssge;

namespace {

Matrix grid_1d() {
  Matrix g(5, 1);
  g << -2, -1, 0, 1, 2;
  return g;
}

// RMS error against the analytic standard-normal score -x.
double grid_rms(std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix samples = standard_normal(static_cast<Eigen::Index>(m), 1, rng);
  const auto est = SsgeEstimator::fit(samples, SsgeConfig::ratio(0.99));
  const Matrix g = grid_1d();
  return std::sqrt((est.estimate_score(g) + g).squaredNorm() / 5.0);
}

}  // namespace

TEST(MedianHeuristic, SmallCases) {
  Matrix two(2, 1);
  two << 0, 2;
  EXPECT_DOUBLE_EQ(median_heuristic(two), 2.0);
  Matrix three(3, 1);
  three << 0, 1, 2;
  EXPECT_DOUBLE_EQ(median_heuristic(three), 1.0);
  EXPECT_DOUBLE_EQ(median_heuristic(Matrix::Constant(4, 2, 3.0)), 1.0);
  EXPECT_DOUBLE_EQ(median_heuristic(three, 2.5), 2.5);
  EXPECT_THROW(median_heuristic(Matrix::Zero(1, 1)), PreconditionError);
}

TEST(SsgeConfig, Validation) {
  EXPECT_THROW(SsgeEstimator::fit(Matrix::Random(5, 1), SsgeConfig::fixed(0)), PreconditionError);
  EXPECT_THROW(SsgeEstimator::fit(Matrix::Random(5, 1), SsgeConfig::ratio(0.0)), PreconditionError);
  EXPECT_THROW(SsgeEstimator::fit(Matrix::Random(5, 1), SsgeConfig::ratio(1.5)), PreconditionError);
}

TEST(SsgeFit, TruncatesWellBelowSampleCount) {
  Rng rng(1);
  const auto est = SsgeEstimator::fit(standard_normal(200, 1, rng));
  EXPECT_GE(est.eigen_count(), 1);
  EXPECT_LT(est.eigen_count(), 50);
  EXPECT_GT(est.eigenvalues().minCoeff(), 0.0);
}

TEST(SsgeFit, TwoSamples) {
  Matrix s(2, 1);
  s << -0.5, 0.7;
  const auto est = SsgeEstimator::fit(s);
  EXPECT_LE(est.eigen_count(), 2);
  const auto fixed = SsgeEstimator::fit(s, SsgeConfig::fixed(2));
  EXPECT_LE(fixed.eigen_count(), 2);
}

TEST(SsgeFit, DuplicatedSamplesGiveSameEstimator) {
  Rng rng(2);
  const Matrix unique = standard_normal(40, 2, rng);
  Matrix doubled(80, 2);
  doubled << unique, unique;
  // Fixed truncation: the cumulative-ratio count is not duplication invariant
  // because the jitter-only eigenvalues of the doubled Gram enter the total.
  // Zero Gram jitter: a jitter shifts lambda and 2*lambda by the same amount.
  auto base = SsgeConfig::fixed(6);
  base.gram_jitter = 0.0;
  const auto a = SsgeEstimator::fit(unique, base);
  auto cfg = base;
  cfg.bandwidth_multiplier = a.bandwidth() / median_heuristic(doubled);
  const auto b = SsgeEstimator::fit(doubled, cfg);
  const Matrix q = standard_normal(10, 2, rng);
  EXPECT_LT((a.estimate_score(q) - b.estimate_score(q)).cwiseAbs().maxCoeff(), 1e-8);
}

// Brute force: explicit per-sample kernel gradients, separate eigensolver.
TEST(SsgeScore, MatchesBruteForceOracle) {
  Rng rng(3);
  const Matrix f = standard_normal(40, 2, rng);
  const Matrix q = standard_normal(6, 2, rng);
  const auto est = SsgeEstimator::fit(f, SsgeConfig::fixed(5));
  const double w = est.bandwidth();
  const Eigen::Index m = f.rows();
  auto kern = [&](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    return std::exp(-(a - b).squaredNorm() / (2 * w * w));
  };
  Matrix gram(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) gram(i, j) = kern(f.row(i), f.row(j)) + (i == j ? 1e-8 : 0.0);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(gram);
  Matrix score = Matrix::Zero(q.rows(), 2);
  for (int jj = 0; jj < 5; ++jj) {
    const Eigen::Index col = m - 1 - jj;
    const double lam = solver.eigenvalues()(col);
    const Vector u = solver.eigenvectors().col(col);
    Eigen::RowVector2d beta = Eigen::RowVector2d::Zero();
    for (Eigen::Index a = 0; a < m; ++a)
      for (Eigen::Index i = 0; i < m; ++i)
        beta -= -(f.row(a) - f.row(i)) / (w * w) * kern(f.row(a), f.row(i)) * u(i);
    beta *= std::sqrt(double(m)) / lam / double(m);
    for (Eigen::Index r = 0; r < q.rows(); ++r) {
      double psi = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) psi += kern(q.row(r), f.row(i)) * u(i);
      score.row(r) += std::sqrt(double(m)) / lam * psi * beta;
    }
  }
  EXPECT_LT((est.estimate_score(q) - score).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SsgeScore, ErrorShrinksWithSampleCount) {
  double small = 0.0, large = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    small += grid_rms(200, 300 + seed);
    large += grid_rms(1000, 400 + seed);
  }
  EXPECT_LT(large, small);
  EXPECT_LT(large / 10.0, 0.35);
}

TEST(SsgeScore, MoreSamplesDoNotHurt) {
  double small = 0.0, large = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    small += grid_rms(100, 100 + seed);
    large += grid_rms(1000, 200 + seed);
  }
  EXPECT_LE(large / 10.0, small / 10.0 + 0.02);
}

TEST(SsgeScore, AntisymmetryUnderNegation) {
  Rng rng(4);
  const Matrix f = standard_normal(60, 3, rng);
  const Matrix x = standard_normal(7, 3, rng);
  const auto a = SsgeEstimator::fit(f);
  const auto b = SsgeEstimator::fit(-f);
  EXPECT_LT((a.estimate_score(x) + b.estimate_score(-x)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SsgeScore, TranslationEquivariance) {
  Rng rng(5);
  const Matrix f = standard_normal(60, 2, rng);
  const Matrix x = standard_normal(7, 2, rng);
  Eigen::RowVector2d shift(1.5, -0.75);
  const auto a = SsgeEstimator::fit(f);
  const auto b = SsgeEstimator::fit(f.rowwise() + shift);
  EXPECT_LT((a.estimate_score(x) - b.estimate_score(x.rowwise() + shift)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SsgeScore, SymmetricSetVanishesAtCenter) {
  Rng rng(6);
  const Matrix half = standard_normal(30, 2, rng);
  Matrix f(60, 2);
  f << half, -half;
  const auto est = SsgeEstimator::fit(f);
  EXPECT_LT(est.estimate_score(Matrix::Zero(1, 2)).norm(), 1e-10);
}

TEST(SsgeScore, DimensionMismatch) {
  Rng rng(7);
  const auto est = SsgeEstimator::fit(standard_normal(10, 2, rng));
  EXPECT_THROW(est.estimate_score(Matrix::Zero(1, 3)), DimensionError);
}

TEST(SsgeScore, Deterministic) {
  Rng rng(8);
  const Matrix f = standard_normal(50, 4, rng);
  const Matrix q = standard_normal(5, 4, rng);
  EXPECT_EQ(SsgeEstimator::fit(f).estimate_score(q), SsgeEstimator::fit(f).estimate_score(q));
}
