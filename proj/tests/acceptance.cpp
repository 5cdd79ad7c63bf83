// Acceptance runner: one PASS/FAIL line per criterion.
//
//   fvi_acceptance [--only N] [--data-dir DIR]
//
// Exit status is 0 only if every selected criterion passed. Tolerances and
// budgets are pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fvi/lab/experiments.hpp"
#include "fvi/lab/oracles.hpp"
#include "fvi/numcore/gradcheck.hpp"
#include "fvi/priors/gp.hpp"
#include "fvi/priors/implicit.hpp"
#include "fvi/priors/kernel.hpp"
#include "fvi/ssge/ssge.hpp"
#include "fvi/vi/felbo.hpp"
#include "fvi/vi/mlp.hpp"

#ifndef FVI_DATA_DIR
#define FVI_DATA_DIR "data"
#endif

using namespace fvi;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// 1. Reparameterized MLP gradients vs central differences.
Outcome autodiff_soundness() {
  constexpr int kConfigs = 60;
  constexpr double kTol = 1e-5, kStep = 1e-6, kScaleFloor = 1e-3;
  Rng rng(101);
  double worst = 0.0;
  for (int c = 0; c < kConfigs; ++c) {
    std::vector<std::size_t> sizes{1 + static_cast<std::size_t>(rng.uniform() * 3)};
    const auto hidden = 1 + static_cast<std::size_t>(rng.uniform() * 3);
    for (std::size_t l = 0; l < hidden; ++l) sizes.push_back(1 + static_cast<std::size_t>(rng.uniform() * 50));
    sizes.push_back(1);
    auto mlp = vi::init_mlp(sizes, vi::Activation::kTanh, rng);
    mlp.set_rho(rng.uniform(-3.0, 0.0));
    const auto n = static_cast<Eigen::Index>(1 + rng.uniform() * 5);
    const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform() * 3);
    const Matrix x = standard_normal(n, static_cast<Eigen::Index>(sizes.front()), rng);
    const Matrix w = standard_normal(static_cast<Eigen::Index>(k), n, rng);
    const std::uint64_t noise_seed = rng();
    auto objective = [&](const vi::StochasticMlp& m) {
      Rng r(noise_seed);
      return vi::sample_functions(m, x, k, r, false).as_matrix().cwiseProduct(w).sum();
    };
    Rng r(noise_seed);
    auto d = vi::sample_functions(mlp, x, k, r);
    d.tape->backward(d.values, vi::detail::to_row_major(w));
    const auto grads = d.gradients();
    auto groups = mlp.parameter_groups();
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t i = 0; i < groups[g].size(); ++i) {
        const double saved = groups[g][i];
        groups[g][i] = saved + kStep;
        const double up = objective(mlp);
        groups[g][i] = saved - kStep;
        const double down = objective(mlp);
        groups[g][i] = saved;
        const double numeric = (up - down) / (2 * kStep);
        worst = std::max(worst, std::abs(grads[g][i] - numeric) / std::max(std::abs(numeric), kScaleFloor));
      }
  }
  return {worst < kTol, std::to_string(kConfigs) + " tanh configs, worst relative error " + fmt(worst) +
                            " (tol " + fmt(kTol) + ")"};
}

// 2. SSGE on standard normals.
double ssge_grid_rms(std::size_t m, Eigen::Index dim, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix s = standard_normal(static_cast<Eigen::Index>(m), dim, rng);
  const auto est = ssge::SsgeEstimator::fit(s, ssge::SsgeConfig::ratio(0.99));
  const std::vector<double> axis{-2, -1, 0, 1, 2};
  Matrix g(dim == 1 ? 5 : 25, dim);
  if (dim == 1) {
    for (Eigen::Index i = 0; i < 5; ++i) g(i, 0) = axis[static_cast<std::size_t>(i)];
  } else {
    for (Eigen::Index i = 0; i < 25; ++i) {
      g(i, 0) = axis[static_cast<std::size_t>(i / 5)];
      g(i, 1) = axis[static_cast<std::size_t>(i % 5)];
    }
  }
  return std::sqrt((est.estimate_score(g) + g).squaredNorm() / static_cast<double>(g.size()));
}

Outcome ssge_accuracy() {
  constexpr double kTol = 0.15, kMonotone = 0.02;
  constexpr int kSeeds = 10;
  auto mean_rms = [&](std::size_t m, Eigen::Index dim) {
    double s = 0.0;
    for (int i = 0; i < kSeeds; ++i) s += ssge_grid_rms(m, dim, 7000 + 100 * static_cast<std::uint64_t>(dim) + i);
    return s / kSeeds;
  };
  const double e1 = mean_rms(200, 1), e2 = mean_rms(500, 2);
  const std::vector<std::size_t> ms{100, 200, 500, 1000};
  std::vector<double> curve;
  for (auto m : ms) curve.push_back(mean_rms(m, 1));
  bool monotone = true;
  for (std::size_t i = 1; i < curve.size(); ++i) monotone = monotone && curve[i] <= curve[i - 1] + kMonotone;
  std::string c;
  for (std::size_t i = 0; i < ms.size(); ++i) c += (i ? " " : "") + std::to_string(ms[i]) + ":" + fmt(curve[i]);
  return {e1 <= kTol && e2 <= kTol && monotone,
          "grid RMS 1-D m=200 " + fmt(e1) + ", 2-D m=500 " + fmt(e2) + " (tol " + fmt(kTol) + "); 1-D curve " + c +
              (monotone ? " monotone" : " NOT monotone")};
}

// 3. fELBO identity with the training inputs in the measurement set.
Outcome felbo_identity() {
  constexpr double kTol = 1e-8;
  Rng rng(303);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto inst = lab::random_felbo_instance(rng);
    const auto q = lab::random_gaussian(inst.x.rows(), rng);
    worst = std::max(worst, std::abs(lab::gp_oracle_felbo(q, inst).residual()));
  }
  return {worst < kTol, "100 instances, worst |L_X - log p(D) + KL| = " + fmt(worst) + " (tol " + fmt(kTol) + ")"};
}

// 4. Weight-space vs function-space KL for linear processes.
Outcome linear_kl() {
  constexpr double kTol = 1e-8;
  Rng rng(404);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto d = static_cast<Eigen::Index>(1 + rng.uniform() * 5);
    const auto n = d + static_cast<Eigen::Index>(rng.uniform() * 4);
    const auto q = lab::random_gaussian(d, rng), p = lab::random_gaussian(d, rng);
    const Matrix x = standard_normal(n, d, rng);
    const auto kl = lab::linear_kl_oracle(q, p, x);
    worst = std::max(worst, std::abs(kl.weight_kl - kl.function_kl));
  }
  return {worst < kTol, "100 instances d<=5, worst |KL_w - KL_f| = " + fmt(worst) + " (tol " + fmt(kTol) + ")"};
}

// 5. Deep addition networks: trained factorized weight VI vs closed forms.
Outcome deep_addition() {
  constexpr double kMeanTol = 0.02, kVarTol = 0.05;
  const std::vector<std::size_t> depths{1, 2, 5, 10, 50};
  Rng rng(505);
  double worst_mean = 0.0, worst_var = 0.0;
  bool monotone = true;
  int cells = 0;
  for (double eta : {0.5, 1.0, 2.0})
    for (double nu : {0.3, 1.0})
      for (std::size_t n : {1, 10}) {
        const auto base = lab::make_deep_addition(eta, nu, n, 1, rng);
        double prev_var = 0.0, prev_gap = std::numeric_limits<double>::infinity();
        for (auto depth : depths) {
          auto spec = base;
          spec.depth = depth;
          const auto cf = lab::deep_addition_oracle(spec).weight_space;
          const auto fit = lab::deep_addition_train(spec, lab::AdditionMethod::kFactorizedWeight);
          worst_mean = std::max(worst_mean, std::abs(fit.aggregate.mean - cf.mean) / std::abs(cf.mean));
          worst_var = std::max(worst_var, std::abs(fit.aggregate.variance - cf.variance) / cf.variance);
          const double gap = eta * eta - fit.aggregate.variance;
          monotone = monotone && fit.aggregate.variance > prev_var && gap < prev_gap && gap > 0.0;
          prev_var = fit.aggregate.variance;
          prev_gap = gap;
          ++cells;
        }
      }
  return {worst_mean <= kMeanTol && worst_var <= kVarTol && monotone,
          std::to_string(cells) + " cells, worst relative error mean " + fmt(worst_mean) + " (tol " + fmt(kMeanTol) +
              "), variance " + fmt(worst_var) + " (tol " + fmt(kVarTol) + "); variance rises toward eta^2 over L " +
              (monotone ? "monotonically" : "NOT monotonically")};
}

// 6. KL cotangent on a single Gaussian point.
Outcome kl_gradient() {
  constexpr double kTol = 0.10;
  constexpr int kSeeds = 20;
  const double mu = 1.0, s = 0.5;
  const vi::PriorSource prior = priors::GpPrior{priors::KernelSpec::rbf(1.0, 1.0), 0.0, 0.0};
  const Matrix x = Matrix::Zero(1, 1);
  double gmu = 0.0, gs = 0.0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(600 + static_cast<std::uint64_t>(seed));
    const Matrix eps = standard_normal(100, 1, rng);
    const Matrix f = (mu + s * eps.array()).matrix();
    const Matrix c = vi::kl_grad_cotangent(f, x, prior, 0.0, {}, rng);
    gmu += c.sum() / kSeeds;
    gs += c.cwiseProduct(eps).sum() / kSeeds;
  }
  const double want_mu = mu, want_s = s - 1.0 / s;
  const double emu = std::abs(gmu - want_mu) / std::abs(want_mu), es = std::abs(gs - want_s) / std::abs(want_s);
  return {emu <= kTol && es <= kTol, "dKL/dmu " + fmt(gmu) + " vs " + fmt(want_mu) + ", dKL/dsigma " + fmt(gs) +
                                         " vs " + fmt(want_s) + " (relative tol " + fmt(kTol) + ")"};
}

// 7. Periodic extrapolation.
lab::PeriodicConfig periodic_config(std::uint64_t seed) {
  lab::PeriodicConfig c;
  c.seed = seed;
  c.arch = "2x100";
  c.methods = {"fbnn-per", "bbb"};
  c.budget.iterations = 20000;
  c.budget.draws = 8;
  c.budget.bbb_draws = 4;
  return c;
}

Outcome periodic_extrapolation() {
  constexpr double kGapTol = 0.3;
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto r = lab::run_periodic(periodic_config(seed));
    const auto f = r.metric("fbnn-per", "extrap_rmse"), b = r.metric("bbb", "extrap_rmse"),
               gap = r.metric("fbnn-per", "gp_gap");
    if (!f || !b || !gap) {
      ok = false;
      detail += " seed " + std::to_string(seed) + ": missing metrics;";
      for (const auto& e : r.failures) detail += " " + e;
      continue;
    }
    ok = ok && *f < *b && *gap <= kGapTol;
    detail += " seed " + std::to_string(seed) + ": fbnn-per " + fmt(*f) + " bbb " + fmt(*b) + " gp_gap " + fmt(*gap) + ";";
  }
  return {ok, "extrapolation RMSE on 2<=|x|<=4 (normalized), gap tol " + fmt(kGapTol) + ":" + detail};
}

// 8. Capacity robustness on the cubic toy.
lab::CubicConfig cubic_config(std::uint64_t seed) {
  lab::CubicConfig c;
  c.seed = seed;
  c.archs = {"2x100", "5x500"};
  c.run_bbb = false;
  c.budget.iterations = 1000;
  c.budget.learning_rate = 5e-3;
  c.budget.draws = 4;
  c.budget.measure_points = 20;
  c.budget.predict_draws = 100;
  return c;
}

Outcome capacity_robustness() {
  constexpr double kRatioTol = 1.5;
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto r = lab::run_toy_cubic(cubic_config(seed));
    const auto a = r.metric("fbnn", "train_region_rmse", "2x100"), b = r.metric("fbnn", "train_region_rmse", "5x500");
    if (!a || !b) {
      ok = false;
      detail += " seed " + std::to_string(seed) + ": missing metrics;";
      continue;
    }
    const double ratio = std::max(*a, *b) / std::min(*a, *b);
    ok = ok && ratio <= kRatioTol;
    detail += " seed " + std::to_string(seed) + ": 2x100 " + fmt(*a) + " 5x500 " + fmt(*b) + " ratio " + fmt(ratio) + ";";
  }
  return {ok, "fBNN train-region RMSE, symmetric ratio tol " + fmt(kRatioTol) + ":" + detail};
}

// 9. Regression ordering.
Outcome regression_ordering(const std::string& data_dir) {
  bool ok = true;
  std::string detail;
  for (const char* name : {"diabetes", "friedman1"}) {
    lab::RegressionConfig c;
    c.seed = 9;
    c.data = std::filesystem::path(data_dir) / (std::string(name) + ".csv");
    if (!std::filesystem::exists(c.data)) {
      ok = false;
      detail += std::string(" ") + name + ": missing " + c.data.string() + " (run tools/make_datasets.py);";
      continue;
    }
    c.splits = 5;
    c.arch = "1x50";
    const auto r = lab::run_regression(c);
    double fb = NAN, bb = NAN, gp = NAN;
    for (const auto& s : r.summary) {
      if (s.method == "fbnn" && s.runs == c.splits) fb = s.rmse_mean;
      if (s.method == "bbb" && s.runs == c.splits) bb = s.rmse_mean;
      if (s.method == "gp") gp = s.rmse_mean;
    }
    ok = ok && fb <= bb;
    detail += std::string(" ") + name + ": fbnn " + fmt(fb) + " bbb " + fmt(bb) + " (exact GP " + fmt(gp) + ");";
  }
  return {ok, "mean test RMSE over 5 splits:" + detail};
}

// 10. Prior-module invariants.
Outcome prior_invariants() {
  using priors::KernelSpec;
  const std::vector<KernelSpec> kernels{KernelSpec::rbf(1.3, 0.7), KernelSpec::periodic(0.8, 1.1, 1.7),
                                        KernelSpec::matern12(1.0, 0.5), KernelSpec::linear(0.6),
                                        KernelSpec::sum({KernelSpec::periodic(1.0, 1.0, 2.0), KernelSpec::rbf(0.1, 2.0)})};
  Rng rng(1010);
  bool exch = true, cons = true, noise = true;
  for (const auto& k : kernels) {
    const Matrix x = standard_normal(8, 2, rng);
    std::vector<Eigen::Index> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix xp(8, 2);
    for (Eigen::Index i = 0; i < 8; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    const Matrix g = priors::kernel_eval(k, x), gp = priors::kernel_eval(k, xp);
    const std::vector<Eigen::Index> sub{0, 3, 4, 7};
    Matrix xs(4, 2);
    for (std::size_t i = 0; i < sub.size(); ++i) xs.row(static_cast<Eigen::Index>(i)) = x.row(sub[i]);
    const Matrix gs = priors::kernel_eval(k, xs);
    for (Eigen::Index i = 0; i < 8; ++i)
      for (Eigen::Index j = 0; j < 8; ++j) exch = exch && gp(i, j) == g(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    for (std::size_t i = 0; i < sub.size(); ++i)
      for (std::size_t j = 0; j < sub.size(); ++j)
        cons = cons && gs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) == g(sub[i], sub[j]);
    const double gamma2 = 0.05;
    const Matrix f = standard_normal(3, 8, rng);
    Matrix cov = g;
    cov.diagonal().array() += gamma2;
    const auto a = priors::gp_score(priors::GpPrior{k, 0.0, gamma2}, x, f);
    const auto b = priors::gaussian_score(cov, 0.0, f);
    noise = noise && a.score == b.score && a.log_density == b.log_density;
  }
  priors::ImplicitPriorSpec lin;
  lin.family = priors::PiecewiseFamily::kLinear;
  double total = 0.0;
  bool pinned = true;
  for (int i = 0; i < 10000; ++i) {
    const auto f = priors::sample_piecewise(lin, rng);
    total += static_cast<double>(f.changepoint_count());
    pinned = pinned && f(1.0) == 0.0;
  }
  const double mean = total / 10000.0;
  const bool poisson = std::abs(mean - 3.0) <= 0.1;
  return {exch && cons && noise && poisson && pinned,
          std::string("exchangeability ") + (exch ? "exact" : "BROKEN") + ", consistency " + (cons ? "exact" : "BROKEN") +
              ", noise injection " + (noise ? "exact" : "BROKEN") + ", Poisson mean " + fmt(mean) +
              " (3.0 +- 0.1), f(1)=0 " + (pinned ? "always" : "VIOLATED")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the functional VI lab"};
  int only = 0;
  std::string data_dir = FVI_DATA_DIR;
  app.add_option("--only", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
  app.add_option("--data-dir", data_dir, "Directory holding diabetes.csv and friedman1.csv");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "autodiff soundness", 30, autodiff_soundness},
      {2, "SSGE accuracy", 60, ssge_accuracy},
      {3, "fELBO identity", 10, felbo_identity},
      {4, "linear-process KL", 10, linear_kl},
      {5, "deep addition", 120, deep_addition},
      {6, "KL gradient estimator", 60, kl_gradient},
      {7, "periodic extrapolation", 600, periodic_extrapolation},
      {8, "capacity robustness", 600, capacity_robustness},
      {9, "regression ordering", 1200, [&] { return regression_ordering(data_dir); }},
      {10, "prior invariants", 30, prior_invariants},
  };
  bool all_pass = true;
  for (const auto& c : all) {
    if (only && c.id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    all_pass = all_pass && pass;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << "; "
              << fmt(secs) << " s (limit " << fmt(c.budget_seconds) << " s" << (in_time ? "" : ", EXCEEDED") << ")"
              << std::endl;
  }
  return all_pass ? 0 : 1;
}
