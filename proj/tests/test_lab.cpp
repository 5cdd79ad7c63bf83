#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "fvi/lab/dataset.hpp"
#include "fvi/lab/experiments.hpp"
#include "fvi/lab/oracles.hpp"

using namespace fvi;
using namespace fvi::lab;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fvi_lab_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::filesystem::path write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

DeepAdditionSpec unit_addition(std::size_t depth) {
  DeepAdditionSpec s;
  s.eta = 1.0;
  s.nu = 1.0;
  s.depth = depth;
  s.x = Vector::Zero(1);
  s.y = Vector::Ones(1);
  return s;
}

ToyBudget tiny_budget() {
  ToyBudget b;
  b.iterations = 30;
  b.draws = 3;
  b.bbb_draws = 2;
  b.measure_points = 5;
  b.predict_draws = 10;
  b.grid_points = 11;
  b.gp_iterations = 20;
  return b;
}

}  // namespace

// --- fELBO identity ----------------------------------------------------------

TEST(FelboOracle, IdentityHoldsOnRandomInstances) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto inst = random_felbo_instance(rng);
    const auto q = random_gaussian(inst.x.rows(), rng);
    const auto id = gp_oracle_felbo(q, inst);
    EXPECT_LT(std::abs(id.residual()), 1e-8) << "instance " << i;
    EXPECT_GE(id.kl, 0.0);
  }
}

TEST(FelboOracle, ExactPosteriorAttainsEvidence) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto inst = random_felbo_instance(rng);
    const auto id = gp_oracle_felbo(function_posterior(inst), inst);
    EXPECT_NEAR(id.kl, 0.0, 1e-8);
    EXPECT_NEAR(id.elbo, id.log_evidence, 1e-8);
  }
}

TEST(FelboOracle, InflatedVarianceFallsBelowEvidence) {
  Rng rng(3);
  const auto inst = random_felbo_instance(rng);
  auto q = function_posterior(inst);
  q.cov *= 2.0;
  const auto id = gp_oracle_felbo(q, inst);
  EXPECT_LT(id.elbo, id.log_evidence);
}

TEST(FelboOracle, RejectsSingularAndMisshapenQ) {
  Rng rng(4);
  const auto inst = random_felbo_instance(rng, 3, 6);
  Gaussian q{Vector::Zero(inst.x.rows()), Matrix::Zero(inst.x.rows(), inst.x.rows())};
  EXPECT_THROW(gp_oracle_felbo(q, inst), NumericalError);
  EXPECT_THROW(felbo_closed_form(random_gaussian(inst.x.rows() + 1, rng), inst), DimensionError);
}

TEST(FelboAscent, ObjectiveMonotoneAndConverges) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto inst = random_felbo_instance(rng);
    const auto res = felbo_ascent(inst, random_gaussian(inst.x.rows(), rng));
    for (std::size_t j = 1; j < res.objective.size(); ++j) EXPECT_GE(res.objective[j], res.objective[j - 1] - 1e-10);
    EXPECT_LT(res.final_kl, 1e-10);
    EXPECT_NEAR(res.objective.back(), gp_log_evidence(inst), 1e-8);
  }
}

TEST(FelboProbeAscent, EveryProbeSetReachesItsPosterior) {
  // q lives on data rows plus a pool; the objective averages L over fixed
  // probe sets of pool rows, each of size >= 2.
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    FelboOracleInstance inst;
    const Eigen::Index nd = 4, pool = 12;
    inst.x = Matrix(nd + pool, 1);
    for (Eigen::Index i = 0; i < inst.x.rows(); ++i) inst.x(i, 0) = rng.uniform(-3.0, 3.0);
    inst.data_rows = {0, 1, 2, 3};
    inst.y = standard_normal(nd, 1, rng).col(0);
    inst.prior = priors::GpPrior{priors::KernelSpec::rbf(1.0, 1.0), 0.0, 1e-2};
    inst.obs_variance = 0.2;
    std::vector<std::vector<std::size_t>> probes;
    for (int p = 0; p < 6; ++p) {
      std::vector<std::size_t> rows(static_cast<std::size_t>(pool));
      std::iota(rows.begin(), rows.end(), static_cast<std::size_t>(nd));
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(2 + static_cast<std::size_t>(rng.uniform() * 4));
      probes.push_back(rows);
    }
    const auto res = felbo_probe_ascent(inst, probes, random_gaussian(inst.x.rows(), rng));
    EXPECT_LT(res.max_kl(), 1e-4) << "trial " << trial;
    for (std::size_t j = 1; j < res.objective.size(); ++j) EXPECT_GE(res.objective[j], res.objective[j - 1] - 1e-10);
  }
}

TEST(FelboProbeAscent, RejectsBadProbeSets) {
  Rng rng(7);
  const auto inst = random_felbo_instance(rng, 2, 8);
  const auto q = random_gaussian(inst.x.rows(), rng);
  EXPECT_THROW(felbo_probe_ascent(inst, {}, q), PreconditionError);
  EXPECT_THROW(felbo_probe_ascent(inst, {{inst.data_rows[0], inst.data_rows[1]}}, q), PreconditionError);
  EXPECT_THROW(felbo_probe_ascent(inst, {{999, 1000}}, q), PreconditionError);
}

// --- linear processes -------------------------------------------------------

TEST(LinearKl, EqualDistributionsGiveZero) {
  Rng rng(8);
  const auto p = random_gaussian(3, rng);
  const auto kl = linear_kl_oracle(p, p, standard_normal(5, 3, rng));
  EXPECT_NEAR(kl.weight_kl, 0.0, 1e-12);
  EXPECT_NEAR(kl.function_kl, 0.0, 1e-12);
}

TEST(LinearKl, IdentityMapInOneDimension) {
  const Gaussian q{Vector::Constant(1, 0.3), Matrix::Constant(1, 1, 0.5)};
  const Gaussian p{Vector::Zero(1), Matrix::Identity(1, 1)};
  const auto kl = linear_kl_oracle(q, p, Matrix::Ones(1, 1));
  EXPECT_EQ(kl.weight_kl, kl.function_kl);
  EXPECT_NEAR(kl.weight_kl, 0.5 * (0.5 + 0.09 - 1.0 - std::log(0.5)), 1e-15);
}

TEST(LinearKl, AgreeOnRandomFullRankInstances) {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    const auto d = static_cast<Eigen::Index>(1 + rng.uniform() * 5);
    const auto q = random_gaussian(d, rng), p = random_gaussian(d, rng);
    const auto kl = linear_kl_oracle(q, p, standard_normal(d + 2, d, rng));
    EXPECT_NEAR(kl.weight_kl, kl.function_kl, 1e-8);
  }
}

TEST(LinearKl, RankDeficientInputsRejected) {
  Rng rng(10);
  const auto q = random_gaussian(3, rng), p = random_gaussian(3, rng);
  Matrix x = standard_normal(4, 3, rng);
  x.col(2) = x.col(0) + x.col(1);
  EXPECT_THROW(linear_kl_oracle(q, p, x), PreconditionError);
}

// --- deep addition ---------------------------------------------------------------

TEST(DeepAddition, ClosedFormsCoincideAtDepthOne) {
  const auto cf = deep_addition_oracle(unit_addition(1));
  EXPECT_DOUBLE_EQ(cf.functional.mean, 0.5);
  EXPECT_DOUBLE_EQ(cf.functional.variance, 0.5);
  EXPECT_DOUBLE_EQ(cf.weight_space.mean, 0.5);
  EXPECT_DOUBLE_EQ(cf.weight_space.variance, 0.5);
}

TEST(DeepAddition, WeightSpaceVarianceGrowsWithDepth) {
  const auto cf = deep_addition_oracle(unit_addition(10));
  EXPECT_NEAR(cf.weight_space.variance, 10.0 / 11.0, 1e-15);
  EXPECT_DOUBLE_EQ(cf.functional.variance, 0.5);
  EXPECT_NEAR(deep_addition_oracle(unit_addition(1000000)).weight_space.variance, 1.0, 1e-5);
}

TEST(DeepAddition, TrainedWeightViMatchesClosedForm) {
  for (std::size_t depth : {1, 10}) {
    const auto spec = unit_addition(depth);
    const auto cf = deep_addition_oracle(spec).weight_space;
    const auto fit = deep_addition_train(spec, AdditionMethod::kFactorizedWeight);
    EXPECT_NEAR(fit.aggregate.mean, cf.mean, 0.02 * std::abs(cf.mean)) << "L=" << depth;
    EXPECT_NEAR(fit.aggregate.variance, cf.variance, 0.05 * cf.variance) << "L=" << depth;
    EXPECT_EQ(fit.layers.size(), depth);
  }
}

TEST(DeepAddition, FunctionalMethodIsConjugatePosterior) {
  Rng rng(11);
  const auto spec = make_deep_addition(2.0, 0.3, 10, 5, rng);
  const auto fit = deep_addition_train(spec, AdditionMethod::kFunctional);
  const auto cf = deep_addition_oracle(spec).functional;
  EXPECT_DOUBLE_EQ(fit.aggregate.mean, cf.mean);
  EXPECT_DOUBLE_EQ(fit.aggregate.variance, cf.variance);
}

TEST(DeepAddition, InvalidSpecRejected) {
  auto s = unit_addition(1);
  s.eta = 0.0;
  EXPECT_THROW(deep_addition_oracle(s), DomainError);
  s = unit_addition(0);
  EXPECT_THROW(deep_addition_oracle(s), PreconditionError);
}

// --- datasets ------------------------------------------------------------------

TEST(LoadCsv, TargetLastByDefault) {
  const auto dir = temp_dir("csv1");
  const auto d = load_csv(write_text(dir / "a.csv", "a,b,t\n1,2,3\n4,5,6\n7,8,9\n"));
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.dim(), 2u);
  EXPECT_EQ(d.target_name, "t");
  EXPECT_EQ(d.y(2), 9.0);
  const auto named = load_csv(dir / "a.csv", "a");
  EXPECT_EQ(named.y(1), 4.0);
  EXPECT_EQ(named.feature_names, (std::vector<std::string>{"b", "t"}));
}

TEST(LoadCsv, ErrorsCarryLineNumbers) {
  const auto dir = temp_dir("csv2");
  try {
    load_csv(write_text(dir / "bad.csv", "a,t\n1,2\n3\n"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(load_csv(write_text(dir / "s.csv", "a,t\n1,x\n")), SchemaError);
  EXPECT_THROW(load_csv(write_text(dir / "f.csv", "a,t\nq,1\n")), ParseError);
  EXPECT_THROW(load_csv(dir / "missing.csv"), std::runtime_error);
}

TEST(LoadCsv, WriteReadRoundTrip) {
  const auto dir = temp_dir("csv3");
  Rng rng(12);
  Dataset d;
  d.x = standard_normal(7, 3, rng) * 1e3;
  d.y = standard_normal(7, 1, rng).col(0) / 7.0;
  d.feature_names = {"p", "q", "r"};
  write_csv(dir / "d.csv", d);
  const auto back = load_csv(dir / "d.csv");
  EXPECT_LT((back.x - d.x).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((back.y - d.y).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalization, ConstantColumnFlaggedAndRoundTrip) {
  Dataset d;
  d.x = Matrix(4, 2);
  d.x << 1, 5, 2, 5, 3, 5, 4, 5;
  d.y = Vector(4);
  d.y << 1, -1, 2, 0.5;
  const auto s = compute_normalization(d);
  EXPECT_FALSE(s.constant_columns[0]);
  EXPECT_TRUE(s.constant_columns[1]);
  const auto n = normalize(d, s.norm);
  EXPECT_EQ(n.x.col(1), Vector::Zero(4));
  EXPECT_NEAR(n.y.mean(), 0.0, 1e-15);
  const auto back = denormalize(n, s.norm);
  EXPECT_LT((back.x - d.x).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((back.y - d.y).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Split, NinetyTenDisjointExhaustiveDeterministic) {
  Dataset d;
  d.x = Matrix(100, 1);
  d.y = Vector(100);
  for (Eigen::Index i = 0; i < 100; ++i) d.x(i, 0) = d.y(i) = static_cast<double>(i);
  const auto [tr, te] = split(d, 0.9, 42);
  EXPECT_EQ(tr.size(), 90u);
  EXPECT_EQ(te.size(), 10u);
  std::multiset<double> all(tr.y.begin(), tr.y.end());
  all.insert(te.y.begin(), te.y.end());
  EXPECT_EQ(all, std::multiset<double>(d.y.begin(), d.y.end()));
  const auto again = split(d, 0.9, 42);
  EXPECT_EQ(again.first.y, tr.y);
  EXPECT_NE(split(d, 0.9, 43).first.y, tr.y);
  EXPECT_THROW(split(d, 1.0, 1), PreconditionError);
}

TEST(Toys, GenerationRecipes) {
  Rng rng(13);
  const auto c = make_cubic_toy(CubicToySpec{}, rng);
  EXPECT_EQ(c.size(), 20u);
  EXPECT_LE(c.x.maxCoeff(), 2.0);
  EXPECT_GE(c.x.minCoeff(), -2.0);
  const auto p = make_periodic_toy(PeriodicToySpec{}, rng);
  for (Eigen::Index i = 0; i < p.x.rows(); ++i) {
    EXPECT_GE(std::abs(p.x(i, 0)), 0.5);
    EXPECT_LE(std::abs(p.x(i, 0)), 2.0);
  }
  const auto imp = make_implicit_toy(priors::ImplicitPriorSpec{}, rng);
  EXPECT_EQ(imp.data.size(), 40u);
  for (Eigen::Index i = 0; i < 40; ++i) {
    const double x = imp.data.x(i, 0);
    EXPECT_TRUE(i < 20 ? (x >= 0.0 && x <= 0.2) : (x >= 0.8 && x <= 1.0));
  }
}

// --- report helpers ------------------------------------------------------------------

TEST(MeanSe, SampleStdOverRootN) {
  const auto [m, se] = mean_se({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(se, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(mean_se({7.0}).second, 0.0);
}

TEST(PredictiveLogLikelihood, SingleDrawIsGaussianDensity) {
  Vector y(2);
  y << 0.5, -1.0;
  Matrix f(1, 2);
  f << 0.0, 0.0;
  const double v = 0.25;
  const double want = 0.5 * ((-0.5 * std::log(2 * std::numbers::pi * v) - 0.125 / v) +
                             (-0.5 * std::log(2 * std::numbers::pi * v) - 0.5 / v));
  EXPECT_NEAR(predictive_log_likelihood(y, f, v), want, 1e-14);
  // Duplicated draws leave the mixture unchanged.
  Matrix ff(3, 2);
  ff << f, f, f;
  EXPECT_NEAR(predictive_log_likelihood(y, ff, v), want, 1e-14);
}

TEST(StreamId, StableAndDistinct) {
  EXPECT_EQ(lab::detail::stream_id(""), 0xCBF29CE484222325ULL);
  EXPECT_NE(lab::detail::stream_id("fbnn/2x100"), lab::detail::stream_id("bbb/2x100"));
}

// --- runners -----------------------------------------------------------------------

TEST(RunToyCubic, GridsPerCellFiniteAndDeterministic) {
  CubicConfig c;
  c.seed = 3;
  c.archs = {"1x8", "2x8"};
  c.budget = tiny_budget();
  const auto r = run_toy_cubic(c);
  EXPECT_TRUE(r.failures.empty());
  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& g : r.grids) {
    cells.insert({g.method, g.arch});
    EXPECT_TRUE(std::isfinite(g.mean) && std::isfinite(g.std));
  }
  EXPECT_EQ(cells.size(), 5u);  // fbnn and bbb per arch, plus the truth
  EXPECT_TRUE(r.metric("fbnn", "train_region_rmse", "2x8").has_value());
  EXPECT_EQ(r.metadata["generation"]["noise_std"], 0.4);
  const auto again = run_toy_cubic(c);
  ASSERT_EQ(again.metrics.size(), r.metrics.size());
  for (std::size_t i = 0; i < r.metrics.size(); ++i) EXPECT_EQ(again.metrics[i].value, r.metrics[i].value);
}

TEST(RunPeriodic, ContainsGpGoldStandardAndBandMetrics) {
  PeriodicConfig c;
  c.seed = 4;
  c.arch = "1x8";
  c.budget = tiny_budget();
  const auto r = run_periodic(c);
  EXPECT_TRUE(r.failures.empty());
  for (const char* m : {"gp-rbf", "gp-per", "fbnn-rbf", "fbnn-per", "bbb"})
    EXPECT_TRUE(r.metric(m, "extrap_rmse").has_value()) << m;
  EXPECT_TRUE(r.metric("fbnn-per", "gp_gap").has_value());
  // The exact PER+RBF posterior is the gold standard on the band.
  EXPECT_LT(*r.metric("gp-per", "extrap_rmse"), *r.metric("gp-rbf", "extrap_rmse"));
  for (const auto& g : r.grids) {
    EXPECT_GE(g.x, -5.0);
    EXPECT_LE(g.x, 5.0);
  }
}

TEST(RunPeriodic, UnknownMethodRecordedAsFailure) {
  PeriodicConfig c;
  c.arch = "1x4";
  c.methods = {"bbb", "nope"};
  c.budget = tiny_budget();
  const auto r = run_periodic(c);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_NE(r.failures[0].find("nope"), std::string::npos);
  EXPECT_TRUE(r.metric("bbb", "extrap_rmse").has_value());
}

TEST(RunImplicit, EmitsSamplesAndLossDeciles) {
  ImplicitConfig c;
  c.seed = 5;
  c.arch = "1x8";
  c.prior.family = priors::PiecewiseFamily::kLinear;
  c.prior_draws = 20;
  c.posterior_samples = 3;
  c.budget = tiny_budget();
  c.budget.measure_points = 40;
  const auto r = run_implicit(c);
  EXPECT_TRUE(r.failures.empty());
  EXPECT_EQ(r.samples.size(), 3u * c.budget.grid_points);
  EXPECT_TRUE(r.metric("fbnn", "loss_first_decile").has_value());
  EXPECT_EQ(r.experiment, "toy-implicit-piecewise-lin");
}

TEST(RunRegression, SummaryRowsAndReportFiles) {
  const auto dir = temp_dir("regress");
  Rng rng(6);
  Dataset d;
  d.x = standard_normal(60, 2, rng);
  d.y = (d.x.col(0).array().sin() + 0.1 * standard_normal(60, 1, rng).col(0).array()).matrix();
  d.feature_names = {"a", "b"};
  write_csv(dir / "toy.csv", d);
  RegressionConfig c;
  c.seed = 1;
  c.data = dir / "toy.csv";
  c.splits = 2;
  c.arch = "1x8";
  c.epochs = 2;
  c.draws = 3;
  c.bbb_draws = 2;
  c.gp_iterations = 10;
  c.predict_draws = 10;
  const auto r = run_regression(c);
  EXPECT_TRUE(r.failures.empty());
  ASSERT_EQ(r.summary.size(), 3u);  // gp reference + fbnn + bbb
  EXPECT_EQ(r.summary.front().method, "gp");
  for (const auto& s : r.summary) {
    EXPECT_EQ(s.runs, 2u);
    EXPECT_EQ(s.dataset, "toy");
    EXPECT_TRUE(std::isfinite(s.rmse_mean));
    EXPECT_EQ(std::isfinite(s.ll_mean), s.method != "gp");
  }
  for (const auto& m : r.metrics) EXPECT_GE(m.split, 0);

  write_report(dir / "a", r, "test");
  const auto again = run_regression(c);
  write_report(dir / "b", again, "test");
  for (const char* f : {"metrics.csv", "summary.csv"}) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_EQ(slurp(dir / "a" / "summary.csv").substr(0, 46), "dataset,method,rmse_mean,rmse_se,ll_mean,ll_se");
  const auto manifest = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  EXPECT_EQ(manifest["git_describe"], "test");
  EXPECT_TRUE(manifest.contains("wall_clock_seconds"));
  EXPECT_EQ(manifest["metadata"]["reference_boston"]["fbnn"]["rmse"], 2.378);
}
