#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fvi/lab/dataset.hpp"
#include "fvi/priors/gp.hpp"
#include "fvi/priors/implicit.hpp"
#include "fvi/vi/train.hpp"

namespace fvi::lab {

// ---------------------------------------------------------------------------
// Report rows. Every metric row names its method, architecture, seed and split.

struct MetricRow {
  std::string method;
  std::string arch;
  std::uint64_t seed = 0;
  int split = -1;  // -1 for single-dataset toys
  std::string metric;
  double value = 0.0;
};

struct GridRow {
  std::string method;
  std::string arch;
  std::uint64_t seed = 0;
  double x = 0.0, mean = 0.0, std = 0.0;
};

struct SampleRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t draw = 0;
  double x = 0.0, f = 0.0;
};

struct SummaryRow {
  std::string dataset, method;
  double rmse_mean = 0.0, rmse_se = 0.0, ll_mean = 0.0, ll_se = 0.0;
  std::size_t runs = 0;
};

struct ExperimentReport {
  std::string experiment;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();
  double wall_clock_seconds = 0.0;
  std::vector<MetricRow> metrics;
  std::vector<GridRow> grids;
  std::vector<SampleRow> samples;
  std::vector<SummaryRow> summary;
  std::optional<Dataset> data;  // training set of a toy run, original units
  std::vector<std::string> failures;

  /// First matching metric value.
  std::optional<double> metric(const std::string& method, const std::string& name, const std::string& arch = "") const {
    for (const auto& r : metrics)
      if (r.method == method && r.metric == name && (arch.empty() || r.arch == arch)) return r.value;
    return std::nullopt;
  }

  void add(const std::string& method, const std::string& arch, const std::string& name, double value, int split = -1) {
    metrics.push_back({method, arch, seed, split, name, value});
  }
};

// ---------------------------------------------------------------------------
// Shared budget for the 1-D toys.

struct ToyBudget {
  std::size_t iterations = 20000;
  double anneal_fraction = 0.6;
  double learning_rate = 1e-3;
  std::size_t draws = 10;       // function draws per step
  std::size_t ssge_draws = 0;   // extra draws for the q-score fit; 0 reuses `draws`
  std::size_t bbb_draws = 10;   // BBB weight draws per step
  std::size_t measure_points = 40;
  std::size_t predict_draws = 200;
  std::size_t grid_points = 201;
  std::optional<double> lambda;
  std::optional<double> gamma;
  std::size_t gp_iterations = 1000;
  double gp_learning_rate = 0.05;
};

inline nlohmann::json to_json(const ToyBudget& b) {
  nlohmann::json j{{"iterations", b.iterations},       {"anneal_fraction", b.anneal_fraction},
                   {"learning_rate", b.learning_rate}, {"draws", b.draws},
                   {"ssge_draws", b.ssge_draws},
                   {"bbb_draws", b.bbb_draws},         {"measure_points", b.measure_points},
                   {"predict_draws", b.predict_draws}, {"grid_points", b.grid_points},
                   {"gp_iterations", b.gp_iterations}, {"gp_learning_rate", b.gp_learning_rate}};
  j["lambda"] = b.lambda ? nlohmann::json(*b.lambda) : nlohmann::json(nullptr);
  j["gamma"] = b.gamma ? nlohmann::json(*b.gamma) : nlohmann::json(nullptr);
  return j;
}

namespace detail {

/// Stable 64-bit FNV-1a, used to derive per-cell rng streams from labels.
inline std::uint64_t stream_id(const std::string& label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline Rng cell_rng(std::uint64_t seed, const std::string& label) { return Rng(seed, stream_id(label)); }

inline Matrix linspace_column(double lo, double hi, std::size_t n) {
  Matrix x(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i)
    x(static_cast<Eigen::Index>(i), 0) = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return x;
}

inline double rmse(const Vector& a, const Vector& b) { return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size())); }

inline vi::TrainConfig toy_train_config(const ToyBudget& b, vi::ObsModel obs) {
  vi::TrainConfig c;
  c.lambda = b.lambda;
  c.gamma = b.gamma;
  c.draws = b.draws;
  c.ssge_draws = b.ssge_draws;
  c.measure_points = b.measure_points;
  c.iterations = b.iterations;
  c.learning_rate = b.learning_rate;
  c.anneal_horizon = static_cast<std::size_t>(std::llround(b.anneal_fraction * static_cast<double>(b.iterations)));
  c.obs = obs;
  c.bbb_draws = b.bbb_draws;
  return c;
}

inline void add_grid(ExperimentReport& r, const std::string& method, const std::string& arch, const Matrix& x,
                     const Vector& mean, const Vector& sd) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) r.grids.push_back({method, arch, r.seed, x(i, 0), mean(i), sd(i)});
}

/// Runs one (method, arch) cell; failures are recorded and the run goes on.
inline bool run_cell(ExperimentReport& r, const std::string& label, const std::function<void()>& body) {
  try {
    body();
    return true;
  } catch (const std::exception& e) {
    r.failures.push_back(label + ": " + e.what());
    return false;
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Vector truth_on(const Matrix& x, double (*truth)(double)) {
  Vector t(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) t(i) = truth(x(i, 0));
  return t;
}

}  // namespace detail

/// S function draws (S x n) without recording, in chunks to bound memory.
inline Matrix function_draws(const vi::StochasticMlp& mlp, const Matrix& x, std::size_t count, Rng& rng) {
  Matrix out(static_cast<Eigen::Index>(count), x.rows());
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < count; s += kChunk) {
    const std::size_t c = std::min(kChunk, count - s);
    out.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c)) =
        vi::sample_functions(mlp, x, c, rng, false).as_matrix();
  }
  return out;
}

/// Mean over points of log (1/S) sum_s N(y; f_s, v), via log-sum-exp.
inline double predictive_log_likelihood(const Vector& y, const Matrix& draws, double obs_variance) {
  const double v = std::max(obs_variance, vi::kObsVarianceFloor);
  const double s = static_cast<double>(draws.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const Vector lp = (-0.5 * (std::log(2.0 * std::numbers::pi * v)) -
                       0.5 * (draws.col(i).array() - y(i)).square() / v).matrix();
    const double m = lp.maxCoeff();
    total += m + std::log((lp.array() - m).exp().sum()) - std::log(s);
  }
  return total / static_cast<double>(y.size());
}

/// Fits an RBF kernel (isotropic) to normalized data by marginal likelihood.
inline priors::GpFit fit_rbf(const Matrix& x, const Vector& y, double obs, std::size_t iterations, double lr, bool fit_obs) {
  return priors::fit_gp_hypers(x, y, priors::KernelSpec::rbf(1.0, 1.0), obs, iterations, lr, fit_obs);
}

/// PER + RBF fit with a grid search over initial periods; keeps the best
/// final marginal likelihood.
inline priors::GpFit fit_periodic_rbf(const Matrix& x, const Vector& y, double obs, const std::vector<double>& periods,
                                      std::size_t iterations, double lr, bool fit_obs) {
  std::optional<priors::GpFit> best;
  double best_ml = -std::numeric_limits<double>::infinity();
  for (double p : periods) {
    const priors::KernelSpec init =
        priors::KernelSpec::sum({priors::KernelSpec::periodic(1.0, 1.0, p), priors::KernelSpec::rbf(0.1, 2.0)});
    try {
      auto fit = priors::fit_gp_hypers(x, y, init, obs, iterations, lr, fit_obs);
      const double ml = priors::gp_log_marginal_likelihood(fit.kernel, x, y, fit.obs_variance).value;
      if (std::isfinite(ml) && ml > best_ml) {
        best_ml = ml;
        best = std::move(fit);
      }
    } catch (const NumericalError&) {
      // This start diverged; others may not.
    }
  }
  if (!best) throw NumericalError("fit_periodic_rbf: every period start failed", 0.0);
  return *best;
}

// ---------------------------------------------------------------------------
// Cubic toy.

struct CubicConfig {
  std::uint64_t seed = 0;
  CubicToySpec data;
  std::vector<std::string> archs{"2x100", "5x500"};
  bool run_bbb = true;
  ToyBudget budget;
};

inline nlohmann::json to_json(const CubicConfig& c) {
  return {{"seed", c.seed},
          {"data", {{"n", c.data.n}, {"lo", c.data.lo}, {"hi", c.data.hi}, {"noise_std", c.data.noise_std}}},
          {"archs", c.archs},
          {"run_bbb", c.run_bbb},
          {"budget", to_json(c.budget)}};
}

/// fBNN (fitted GP-RBF prior) and BBB on y = x^3 + noise, per architecture.
/// train_region_rmse compares the predictive mean with the noiseless cubic on
/// the training interval, in normalized target units.
inline ExperimentReport run_toy_cubic(const CubicConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.experiment = "toy-cubic";
  rep.seed = cfg.seed;
  rep.config = to_json(cfg);
  Rng data_rng = detail::cell_rng(cfg.seed, "data");
  const Dataset raw = make_cubic_toy(cfg.data, data_rng);
  rep.data = raw;
  const auto stats = compute_normalization(raw);
  const Normalization& nz = stats.norm;
  const Dataset train = normalize(raw, nz);
  const double obs = std::pow(cfg.data.noise_std / nz.y_std, 2.0);
  rep.metadata["generation"] = {{"x", "uniform"},           {"lo", cfg.data.lo},
                                {"hi", cfg.data.hi},        {"n", cfg.data.n},
                                {"noise_std", cfg.data.noise_std}, {"truth", "x^3"}};
  rep.metadata["obs_variance_normalized"] = obs;

  const auto gp = fit_rbf(train.x, train.y, obs, cfg.budget.gp_iterations, cfg.budget.gp_learning_rate, false);
  const priors::GpPrior prior = priors::GpPrior::with_default_jitter(gp.kernel);
  rep.metadata["gp_kernel"] = priors::kernel_to_json(gp.kernel);

  const double width = cfg.data.hi - cfg.data.lo;
  const Matrix grid = detail::linspace_column(cfg.data.lo - width / 2, cfg.data.hi + width / 2, cfg.budget.grid_points);
  std::vector<Eigen::Index> inside;
  for (Eigen::Index i = 0; i < grid.rows(); ++i)
    if (grid(i, 0) >= cfg.data.lo && grid(i, 0) <= cfg.data.hi) inside.push_back(i);
  const Vector truth = detail::truth_on(grid, cubic_truth);

  auto evaluate = [&](const std::string& method, const std::string& arch, const vi::StochasticMlp& mlp,
                      const vi::TrainResult& res) {
    Rng prng = detail::cell_rng(cfg.seed, "predict/" + method + "/" + arch);
    const auto pred = vi::predict(mlp, grid, cfg.budget.predict_draws, prng, nz);
    detail::add_grid(rep, method, arch, grid, pred.mean.col(0), pred.std.col(0));
    double se = 0.0;
    for (auto i : inside) se += std::pow((pred.mean(i, 0) - truth(i)) / nz.y_std, 2.0);
    rep.add(method, arch, "train_region_rmse", std::sqrt(se / static_cast<double>(inside.size())));
    const auto tp = vi::predict(mlp, raw.x, cfg.budget.predict_draws, prng, nz);
    rep.add(method, arch, "train_rmse", detail::rmse(tp.mean.col(0), raw.y) / nz.y_std);
    rep.add(method, arch, "final_loglik", res.trace.empty() ? 0.0 : res.trace.back().loglik);
  };

  for (const auto& arch : cfg.archs) {
    detail::run_cell(rep, "fbnn/" + arch, [&] {
      Rng rng = detail::cell_rng(cfg.seed, "fbnn/" + arch);
      auto mlp = vi::init_mlp(vi::parse_arch(arch, 1, 1), vi::Activation::kRelu, rng);
      const auto res = vi::train_fbnn(mlp, train.x, train.y, prior, detail::toy_train_config(cfg.budget, vi::ObsModel::fixed(obs)), rng);
      evaluate("fbnn", arch, mlp, res);
    });
    if (!cfg.run_bbb) continue;
    detail::run_cell(rep, "bbb/" + arch, [&] {
      Rng rng = detail::cell_rng(cfg.seed, "bbb/" + arch);
      auto mlp = vi::init_mlp(vi::parse_arch(arch, 1, 1), vi::Activation::kRelu, rng);
      const auto res = vi::train_bbb(mlp, train.x, train.y, detail::toy_train_config(cfg.budget, vi::ObsModel::fixed(obs)), rng);
      evaluate("bbb", arch, mlp, res);
    });
  }
  detail::add_grid(rep, "truth", "", grid, truth, Vector::Zero(grid.rows()));
  rep.wall_clock_seconds = detail::seconds_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Periodic toy.

struct PeriodicConfig {
  std::uint64_t seed = 0;
  PeriodicToySpec data;
  std::string arch = "2x100";
  std::vector<std::string> methods{"fbnn-rbf", "fbnn-per", "bbb"};
  double domain = 5.0;                     // grid and measurement points on [-domain, domain]
  double band_lo = 2.0, band_hi = 4.0;     // extrapolation band |x| in [band_lo, band_hi]
  std::vector<double> periods{0.5, 0.75, 1.0, 1.5, 2.0, 3.0};  // initial periods, input units
  ToyBudget budget = default_budget();

  /// lr 1e-2 and injected noise 0.1 (normalized units): with the near-singular
  /// PER Gram, smaller gamma lets the prior score swamp the data term.
  static ToyBudget default_budget() {
    ToyBudget b;
    b.learning_rate = 1e-2;
    b.gamma = 0.1;
    return b;
  }
};

inline nlohmann::json to_json(const PeriodicConfig& c) {
  return {{"seed", c.seed},
          {"data", {{"n", c.data.n}, {"noise_variance", c.data.noise_variance}}},
          {"arch", c.arch},
          {"methods", c.methods},
          {"domain", c.domain},
          {"band", {c.band_lo, c.band_hi}},
          {"periods", c.periods},
          {"budget", to_json(c.budget)}};
}

/// fBNN under fitted RBF and PER+RBF priors, BBB, and the exact GP posteriors.
/// Measurement points: every training input plus `measure_points` uniform
/// draws on [-domain, domain]. Metrics are in normalized target units.
inline ExperimentReport run_periodic(const PeriodicConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.experiment = "toy-periodic";
  rep.seed = cfg.seed;
  rep.config = to_json(cfg);
  Rng data_rng = detail::cell_rng(cfg.seed, "data");
  const Dataset raw = make_periodic_toy(cfg.data, data_rng);
  rep.data = raw;
  const auto stats = compute_normalization(raw);
  const Normalization& nz = stats.norm;
  const Dataset train = normalize(raw, nz);
  const double obs = cfg.data.noise_variance / (nz.y_std * nz.y_std);
  rep.metadata["generation"] = {{"x", "uniform on [-2,-0.5] U [0.5,2]"},
                                {"truth", "2 sin(4x)"},
                                {"noise_variance", cfg.data.noise_variance},
                                {"n", cfg.data.n}};
  rep.metadata["obs_variance_normalized"] = obs;

  const auto& b = cfg.budget;
  const auto rbf = fit_rbf(train.x, train.y, obs, b.gp_iterations, b.gp_learning_rate, false);
  std::vector<double> periods;
  for (double p : cfg.periods) periods.push_back(p / nz.x_std(0));
  const auto per = fit_periodic_rbf(train.x, train.y, obs, periods, b.gp_iterations, b.gp_learning_rate, false);
  rep.metadata["gp_kernel_rbf"] = priors::kernel_to_json(rbf.kernel);
  rep.metadata["gp_kernel_per"] = priors::kernel_to_json(per.kernel);
  const priors::GpPrior prior_rbf = priors::GpPrior::with_default_jitter(rbf.kernel);
  const priors::GpPrior prior_per = priors::GpPrior::with_default_jitter(per.kernel);

  const Matrix grid = detail::linspace_column(-cfg.domain, cfg.domain, b.grid_points);
  const Matrix grid_n = nz.normalize_x(grid);
  const Vector truth = detail::truth_on(grid, periodic_truth);
  std::vector<Eigen::Index> band;
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    const double a = std::abs(grid(i, 0));
    if (a >= cfg.band_lo - 1e-12 && a <= cfg.band_hi + 1e-12) band.push_back(i);
  }
  auto band_rmse = [&](const Vector& mean) {
    double se = 0.0;
    for (auto i : band) se += std::pow((mean(i) - truth(i)) / nz.y_std, 2.0);
    return std::sqrt(se / static_cast<double>(band.size()));
  };

  // Exact GP posteriors (normalized space), reported in original units.
  std::optional<Vector> gp_per_mean;
  for (const auto& cell : {std::pair{std::string("gp-rbf"), prior_rbf}, std::pair{std::string("gp-per"), prior_per}}) {
    const std::string& name = cell.first;
    const priors::GpPrior& prior = cell.second;
    detail::run_cell(rep, name, [&] {
      const auto post = priors::gp_exact_posterior(prior, train.x, train.y, obs, grid_n);
      const Vector mean = nz.denormalize_y(post.mean);
      const Vector sd = (post.covariance.diagonal().array().max(0.0).sqrt() * nz.y_std).matrix();
      detail::add_grid(rep, name, "", grid, mean, sd);
      rep.add(name, "", "extrap_rmse", band_rmse(mean));
      if (name == "gp-per") gp_per_mean = mean;
    });
  }

  vi::Box box{Vector::Constant(1, (-cfg.domain - nz.x_mean(0)) / nz.x_std(0)),
              Vector::Constant(1, (cfg.domain - nz.x_mean(0)) / nz.x_std(0))};
  for (const auto& method : cfg.methods) {
    detail::run_cell(rep, method + "/" + cfg.arch, [&] {
      Rng rng = detail::cell_rng(cfg.seed, method + "/" + cfg.arch);
      auto mlp = vi::init_mlp(vi::parse_arch(cfg.arch, 1, 1), vi::Activation::kRelu, rng);
      auto tc = detail::toy_train_config(b, vi::ObsModel::fixed(obs));
      tc.measure_box = box;
      vi::TrainResult res;
      if (method == "fbnn-rbf")
        res = vi::train_fbnn(mlp, train.x, train.y, prior_rbf, tc, rng);
      else if (method == "fbnn-per")
        res = vi::train_fbnn(mlp, train.x, train.y, prior_per, tc, rng);
      else if (method == "bbb")
        res = vi::train_bbb(mlp, train.x, train.y, tc, rng);
      else
        throw PreconditionError("unknown periodic method '" + method + "'");
      Rng prng = detail::cell_rng(cfg.seed, "predict/" + method);
      const auto pred = vi::predict(mlp, grid, b.predict_draws, prng, nz);
      const Vector mean = pred.mean.col(0);
      detail::add_grid(rep, method, cfg.arch, grid, mean, pred.std.col(0));
      rep.add(method, cfg.arch, "extrap_rmse", band_rmse(mean));
      const auto tp = vi::predict(mlp, raw.x, b.predict_draws, prng, nz);
      rep.add(method, cfg.arch, "train_rmse", detail::rmse(tp.mean.col(0), raw.y) / nz.y_std);
      rep.add(method, cfg.arch, "final_loglik", res.trace.empty() ? 0.0 : res.trace.back().loglik);
      if (method == "fbnn-per" && gp_per_mean) {
        double gap = 0.0;
        for (auto i : band) gap += std::abs(mean(i) - (*gp_per_mean)(i)) / nz.y_std;
        rep.add(method, cfg.arch, "gp_gap", gap / static_cast<double>(band.size()));
      }
    });
  }
  detail::add_grid(rep, "truth", "", grid, truth, Vector::Zero(grid.rows()));
  rep.wall_clock_seconds = detail::seconds_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Implicit piecewise priors.

struct ImplicitConfig {
  std::uint64_t seed = 0;
  priors::ImplicitPriorSpec prior;
  std::string arch = "2x100";
  double noise_std = 0.02;
  std::size_t prior_draws = 100;  // SSGE samples of the prior per step
  std::size_t posterior_samples = 10;
  ToyBudget budget;
};

inline const char* family_name(priors::PiecewiseFamily f) {
  return f == priors::PiecewiseFamily::kConstant ? "piecewise-const" : "piecewise-lin";
}

inline nlohmann::json to_json(const ImplicitConfig& c) {
  return {{"seed", c.seed},
          {"family", family_name(c.prior.family)},
          {"changepoint_rate", c.prior.changepoint_rate},
          {"arch", c.arch},
          {"noise_std", c.noise_std},
          {"prior_draws", c.prior_draws},
          {"posterior_samples", c.posterior_samples},
          {"budget", to_json(c.budget)}};
}

/// tanh fBNN under an implicit piecewise prior scored by SSGE. Data and
/// prior live on [0, 1] in original units, so nothing is normalized.
/// loss_* metrics are decile means of the per-step negative log-likelihood.
inline ExperimentReport run_implicit(const ImplicitConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.experiment = std::string("toy-implicit-") + family_name(cfg.prior.family);
  rep.seed = cfg.seed;
  rep.config = to_json(cfg);
  cfg.prior.validate();
  Rng data_rng = detail::cell_rng(cfg.seed, "data");
  const ImplicitToy toy = make_implicit_toy(cfg.prior, data_rng, cfg.noise_std);
  rep.data = toy.data;
  rep.metadata["truth_changepoints"] = toy.truth.changepoints;
  rep.metadata["truth_values"] = toy.truth.values;
  const double obs = cfg.noise_std * cfg.noise_std;

  const auto& b = cfg.budget;
  const Matrix grid = detail::linspace_column(cfg.prior.domain_lo, cfg.prior.domain_hi, b.grid_points);
  Vector truth(grid.rows());
  for (Eigen::Index i = 0; i < grid.rows(); ++i) truth(i) = toy.truth(grid(i, 0));
  detail::add_grid(rep, "truth", "", grid, truth, Vector::Zero(grid.rows()));

  detail::run_cell(rep, "fbnn/" + cfg.arch, [&] {
    Rng rng = detail::cell_rng(cfg.seed, "fbnn/" + cfg.arch);
    auto mlp = vi::init_mlp(vi::parse_arch(cfg.arch, 1, 1), vi::Activation::kTanh, rng);
    auto tc = detail::toy_train_config(b, vi::ObsModel::fixed(obs));
    tc.measure_box = vi::Box{Vector::Constant(1, cfg.prior.domain_lo), Vector::Constant(1, cfg.prior.domain_hi)};
    const vi::PriorSource prior = vi::ImplicitScorePrior{cfg.prior, cfg.prior_draws};
    const auto res = vi::train_fbnn(mlp, toy.data.x, toy.data.y, prior, tc, rng);
    Rng prng = detail::cell_rng(cfg.seed, "predict");
    const auto pred = vi::predict(mlp, grid, b.predict_draws, prng);
    detail::add_grid(rep, "fbnn", cfg.arch, grid, pred.mean.col(0), pred.std.col(0));
    rep.add("fbnn", cfg.arch, "truth_rmse", detail::rmse(pred.mean.col(0), truth));
    const auto tp = vi::predict(mlp, toy.data.x, b.predict_draws, prng);
    rep.add("fbnn", cfg.arch, "train_rmse", detail::rmse(tp.mean.col(0), toy.data.y));
    const Matrix draws = function_draws(mlp, grid, cfg.posterior_samples, prng);
    for (Eigen::Index s = 0; s < draws.rows(); ++s)
      for (Eigen::Index i = 0; i < grid.rows(); ++i)
        rep.samples.push_back({"fbnn", cfg.seed, static_cast<std::size_t>(s), grid(i, 0), draws(s, i)});
    const std::size_t dec = std::max<std::size_t>(1, res.trace.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < dec; ++i) {
      first -= res.trace[i].loglik;
      last -= res.trace[res.trace.size() - 1 - i].loglik;
    }
    rep.add("fbnn", cfg.arch, "loss_first_decile", first / static_cast<double>(dec));
    rep.add("fbnn", cfg.arch, "loss_last_decile", last / static_cast<double>(dec));
  });
  rep.wall_clock_seconds = detail::seconds_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Regression benchmark.

struct RegressionConfig {
  std::uint64_t seed = 0;
  std::filesystem::path data;
  std::string target;      // empty: last column
  std::string name;        // dataset tag; default file stem
  std::size_t splits = 10;
  double train_fraction = 0.9;
  std::string arch = "1x50";
  std::vector<std::string> methods{"fbnn", "bbb"};
  std::size_t epochs = 500;
  std::size_t batch_size = 20;  // training examples per measurement set
  std::size_t measure_points = 5;
  std::size_t draws = 10;
  std::size_t bbb_draws = 10;
  double learning_rate = 1e-3;
  double anneal_fraction = 0.0;
  std::optional<double> lambda;
  std::optional<double> gamma;
  std::size_t gp_iterations = 300;
  double gp_learning_rate = 0.05;
  std::size_t gp_subset = 500;  // marginal likelihood fit on at most this many rows
  std::size_t predict_draws = 100;
};

inline nlohmann::json to_json(const RegressionConfig& c) {
  nlohmann::json j{{"seed", c.seed},
                   {"data", c.data.string()},
                   {"target", c.target},
                   {"name", c.name},
                   {"splits", c.splits},
                   {"train_fraction", c.train_fraction},
                   {"arch", c.arch},
                   {"methods", c.methods},
                   {"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"measure_points", c.measure_points},
                   {"draws", c.draws},
                   {"bbb_draws", c.bbb_draws},
                   {"learning_rate", c.learning_rate},
                   {"anneal_fraction", c.anneal_fraction},
                   {"gp_iterations", c.gp_iterations},
                   {"gp_learning_rate", c.gp_learning_rate},
                   {"gp_subset", c.gp_subset},
                   {"predict_draws", c.predict_draws}};
  j["lambda"] = c.lambda ? nlohmann::json(*c.lambda) : nlohmann::json(nullptr);
  j["gamma"] = c.gamma ? nlohmann::json(*c.gamma) : nlohmann::json(nullptr);
  return j;
}

/// Mean and standard error (sample std / sqrt(runs)).
inline std::pair<double, double> mean_se(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

/// Per split: normalize on the training part, fit an RBF GP (obs variance
/// included) on a subset, then train the fBNN with that prior and an obs
/// variance bounded below by the GP's, and BBB with the same obs model.
/// Test RMSE and log-likelihood are in original units.
inline ExperimentReport run_regression(const RegressionConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport rep;
  const Dataset full = load_csv(cfg.data, cfg.target);
  const std::string name = cfg.name.empty() ? cfg.data.stem().string() : cfg.name;
  rep.experiment = "regression-" + name;
  rep.seed = cfg.seed;
  rep.config = to_json(cfg);
  rep.config["name"] = name;
  rep.metadata["rows"] = full.size();
  rep.metadata["features"] = full.feature_names;
  rep.metadata["target"] = full.target_name;
  rep.metadata["reference_boston"] = {{"fbnn", {{"rmse", 2.378}, {"rmse_se", 0.104}}},
                                      {"bbb", {{"rmse", 3.171}, {"rmse_se", 0.149}}}};
  std::map<std::string, std::vector<double>> rmses, lls;

  for (std::size_t sp = 0; sp < cfg.splits; ++sp) {
    const int split_id = static_cast<int>(sp);
    const auto parts = split(full, cfg.train_fraction, cfg.seed * 1000003ULL + sp);
    const Dataset& train_raw = parts.first;
    const Dataset& test = parts.second;
    const auto stats = compute_normalization(train_raw);
    const Normalization& nz = stats.norm;
    const Dataset train = normalize(train_raw, nz);
    std::optional<priors::GpFit> gp;
    detail::run_cell(rep, "gp/split" + std::to_string(sp), [&] {
      Dataset sub = train;
      if (train.size() > cfg.gp_subset) {
        std::vector<std::size_t> idx(train.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng srng = detail::cell_rng(cfg.seed, "gp-subset/" + std::to_string(sp));
        std::shuffle(idx.begin(), idx.end(), srng);
        idx.resize(cfg.gp_subset);
        sub = subset(train, idx);
      }
      gp = fit_rbf(sub.x, sub.y, 0.1, cfg.gp_iterations, cfg.gp_learning_rate, true);
      // Exact GP posterior with the fitted hyperparameters, as a reference row.
      const auto post = priors::gp_exact_posterior(priors::GpPrior::with_default_jitter(gp->kernel), train.x, train.y,
                                                   gp->obs_variance, nz.normalize_x(test.x));
      const Vector mean = (post.mean.array() * nz.y_std + nz.y_mean).matrix();
      const double r = detail::rmse(mean, test.y);
      rep.add("gp", "", "test_rmse", r, split_id);
      rep.add("gp", "", "obs_variance", gp->obs_variance * nz.y_std * nz.y_std, split_id);
      rmses["gp"].push_back(r);
    });
    if (!gp) continue;
    const priors::GpPrior prior = priors::GpPrior::with_default_jitter(gp->kernel);
    const std::size_t batch = std::min(cfg.batch_size, train.size());
    const std::size_t per_epoch = (train.size() + batch - 1) / batch;
    vi::TrainConfig tc;
    tc.lambda = cfg.lambda;
    tc.gamma = cfg.gamma;
    tc.draws = cfg.draws;
    tc.ssge_draws = 0;
    tc.measure_points = cfg.measure_points;
    tc.batch_size = batch;
    tc.iterations = cfg.epochs * per_epoch;
    tc.learning_rate = cfg.learning_rate;
    tc.anneal_horizon = static_cast<std::size_t>(std::llround(cfg.anneal_fraction * static_cast<double>(tc.iterations)));
    tc.obs = vi::ObsModel::lower_bounded(gp->obs_variance);
    tc.bbb_draws = cfg.bbb_draws;

    for (const auto& method : cfg.methods) {
      const std::string label = method + "/split" + std::to_string(sp);
      detail::run_cell(rep, label, [&] {
        Rng rng = detail::cell_rng(cfg.seed, label);
        auto mlp = vi::init_mlp(vi::parse_arch(cfg.arch, train.dim(), 1), vi::Activation::kRelu, rng);
        vi::TrainResult res;
        if (method == "fbnn")
          res = vi::train_fbnn(mlp, train.x, train.y, prior, tc, rng);
        else if (method == "bbb")
          res = vi::train_bbb(mlp, train.x, train.y, tc, rng);
        else
          throw PreconditionError("unknown regression method '" + method + "'");
        Rng prng = detail::cell_rng(cfg.seed, "predict/" + label);
        Matrix draws = function_draws(mlp, nz.normalize_x(test.x), cfg.predict_draws, prng);
        draws = ((draws.array() * nz.y_std) + nz.y_mean).matrix();
        const Vector mean = draws.colwise().mean().transpose();
        const double obs_orig = res.obs.variance() * nz.y_std * nz.y_std;
        const double r = detail::rmse(mean, test.y);
        const double ll = predictive_log_likelihood(test.y, draws, obs_orig);
        rep.add(method, cfg.arch, "test_rmse", r, split_id);
        rep.add(method, cfg.arch, "test_ll", ll, split_id);
        rep.add(method, cfg.arch, "obs_variance", obs_orig, split_id);
        rmses[method].push_back(r);
        lls[method].push_back(ll);
      });
    }
  }
  if (!rmses["gp"].empty()) {
    const auto [rm, rse] = mean_se(rmses["gp"]);
    rep.summary.push_back({name, "gp", rm, rse, NAN, NAN, rmses["gp"].size()});
  }
  for (const auto& method : cfg.methods) {
    const auto [rm, rse] = mean_se(rmses[method]);
    const auto [lm, lse] = mean_se(lls[method]);
    rep.summary.push_back({name, method, rm, rse, lm, lse, rmses[method].size()});
  }
  rep.wall_clock_seconds = detail::seconds_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Emitters.

inline void write_metrics_csv(const std::filesystem::path& path, const ExperimentReport& r) {
  std::ofstream out(path);
  out << "experiment,method,arch,seed,split,metric,value\n";
  for (const auto& m : r.metrics)
    out << r.experiment << ',' << m.method << ',' << m.arch << ',' << m.seed << ',' << m.split << ',' << m.metric
        << ',' << fmt17(m.value) << '\n';
}

inline void write_grids_csv(const std::filesystem::path& path, const ExperimentReport& r) {
  std::ofstream out(path);
  out << "method,arch,seed,x,mean,std\n";
  for (const auto& g : r.grids)
    out << g.method << ',' << g.arch << ',' << g.seed << ',' << fmt17(g.x) << ',' << fmt17(g.mean) << ','
        << fmt17(g.std) << '\n';
}

inline void write_samples_csv(const std::filesystem::path& path, const ExperimentReport& r) {
  std::ofstream out(path);
  out << "method,seed,draw,x,f\n";
  for (const auto& s : r.samples)
    out << s.method << ',' << s.seed << ',' << s.draw << ',' << fmt17(s.x) << ',' << fmt17(s.f) << '\n';
}

inline void write_summary_csv(const std::filesystem::path& path, const ExperimentReport& r) {
  std::ofstream out(path);
  out << "dataset,method,rmse_mean,rmse_se,ll_mean,ll_se,runs\n";
  for (const auto& s : r.summary)
    out << s.dataset << ',' << s.method << ',' << fmt17(s.rmse_mean) << ',' << fmt17(s.rmse_se) << ','
        << fmt17(s.ll_mean) << ',' << fmt17(s.ll_se) << ',' << s.runs << '\n';
}

/// Writes manifest.json, metrics.csv and whichever of grids.csv, samples.csv,
/// summary.csv and data.csv have content. Only the manifest carries the
/// wall-clock time, so CSVs are byte-identical across reruns.
inline void write_report(const std::filesystem::path& dir, const ExperimentReport& r, const std::string& git_describe,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files{"manifest.json", "metrics.csv"};
  write_metrics_csv(dir / "metrics.csv", r);
  if (!r.grids.empty()) {
    write_grids_csv(dir / "grids.csv", r);
    files.emplace_back("grids.csv");
  }
  if (!r.samples.empty()) {
    write_samples_csv(dir / "samples.csv", r);
    files.emplace_back("samples.csv");
  }
  if (!r.summary.empty()) {
    write_summary_csv(dir / "summary.csv", r);
    files.emplace_back("summary.csv");
  }
  if (r.data) {
    write_csv(dir / "data.csv", *r.data);
    files.emplace_back("data.csv");
  }
  nlohmann::json m{{"experiment", r.experiment},
                   {"seed", r.seed},
                   {"config", r.config},
                   {"metadata", r.metadata},
                   {"git_describe", git_describe},
                   {"wall_clock_seconds", r.wall_clock_seconds},
                   {"failures", r.failures},
                   {"files", files}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream mf(dir / "manifest.json");
  mf << m.dump(2) << '\n';
  if (!mf) throw std::runtime_error("write_report: cannot write " + (dir / "manifest.json").string());
}

}  // namespace fvi::lab
