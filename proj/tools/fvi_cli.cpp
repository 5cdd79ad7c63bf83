// fvi: command-line front end for the functional VI lab.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure (including any
// experiment cell that failed; its report is still written).

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fvi/lab/experiments.hpp"
#include "fvi/lab/oracles.hpp"
#include "fvi/vi/checkpoint.hpp"

#ifndef FVI_GIT_DESCRIBE
#define FVI_GIT_DESCRIBE "unknown"
#endif

namespace {

using namespace fvi;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Options shared by the training-style subcommands.
struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::optional<std::size_t> iters;
  std::optional<double> lr;
  std::optional<double> lambda;
  std::optional<double> gamma;
  std::optional<std::size_t> measure_points;
  std::optional<std::size_t> draws;
  std::string arch;
};

void add_common(CLI::App* c, Common& o, bool needs_out = true) {
  c->add_option("--seed", o.seed, "Master seed");
  auto* out = c->add_option("--out", o.out, "Output directory");
  if (needs_out) out->required();
  c->add_option("--iters", o.iters, "Training iterations (epochs for regress)");
  c->add_option("--lr", o.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  c->add_option("--lambda", o.lambda, "KL weight (default 1/|Ds|)")->check(CLI::PositiveNumber);
  c->add_option("--gamma", o.gamma, "Injected-noise std on function values")->check(CLI::NonNegativeNumber);
  c->add_option("--measure-points", o.measure_points, "Measurement points sampled per step")
      ->check(CLI::PositiveNumber);
  c->add_option("--draws", o.draws, "Function (or weight) draws per step")->check(CLI::Range(2, 100000));
}

void apply(const Common& o, lab::ToyBudget& b) {
  if (o.iters) b.iterations = *o.iters;
  if (o.lr) b.learning_rate = *o.lr;
  if (o.lambda) b.lambda = o.lambda;
  if (o.gamma) b.gamma = o.gamma;
  if (o.measure_points) b.measure_points = *o.measure_points;
  if (o.draws) b.draws = b.bbb_draws = *o.draws;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// "fixed:v" or "trainable:floor", in original target units.
vi::ObsModel parse_obs(const std::string& spec, double y_scale) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw UsageError("--obs-var expects fixed:v or trainable:floor, got '" + spec + "'");
  const std::string kind = spec.substr(0, colon);
  double v = 0.0;
  try {
    v = std::stod(spec.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--obs-var: bad number in '" + spec + "'");
  }
  const double s2 = y_scale * y_scale;
  if (kind == "fixed") {
    if (!(v > 0.0)) throw UsageError("--obs-var fixed:v needs v > 0");
    return vi::ObsModel::fixed(v / s2);
  }
  if (kind == "trainable") {
    if (!(v >= 0.0)) throw UsageError("--obs-var trainable:floor needs floor >= 0");
    return vi::ObsModel::lower_bounded(v / s2);
  }
  throw UsageError("--obs-var: unknown mode '" + kind + "'");
}

bool is_gp_prior(const std::string& p) { return p == "rbf" || p == "per-rbf" || p == "matern12"; }

priors::PiecewiseFamily piecewise_family(const std::string& p) {
  if (p == "piecewise-const") return priors::PiecewiseFamily::kConstant;
  if (p == "piecewise-lin") return priors::PiecewiseFamily::kLinear;
  throw UsageError("expected piecewise-const or piecewise-lin, got '" + p + "'");
}

/// Marginal-likelihood fit of the named kernel on normalized data.
priors::GpFit fit_named_kernel(const std::string& prior, const lab::Dataset& d, std::size_t iters, double lr) {
  if (prior == "rbf") return lab::fit_rbf(d.x, d.y, 0.1, iters, lr, true);
  if (prior == "matern12")
    return priors::fit_gp_hypers(d.x, d.y, priors::KernelSpec::matern12(1.0, 1.0), 0.1, iters, lr, true);
  if (prior == "per-rbf") {
    if (d.dim() != 1) throw UsageError("per-rbf prior needs one input column");
    return lab::fit_periodic_rbf(d.x, d.y, 0.1, {0.5, 1.0, 2.0, 4.0}, iters, lr, true);
  }
  throw UsageError("unknown GP prior '" + prior + "'");
}

int finish(const lab::ExperimentReport& r, const std::string& out) {
  lab::write_report(out, r, FVI_GIT_DESCRIBE);
  std::cout << r.experiment << ": " << r.metrics.size() << " metric rows written to " << out << " ("
            << r.wall_clock_seconds << " s)\n";
  for (const auto& f : r.failures) std::cerr << "failed cell: " << f << '\n';
  return r.failures.empty() ? 0 : 2;
}

// --- fit-gp ----------------------------------------------------------------

struct FitGpOpts {
  Common c;
  std::string data, target, prior = "rbf";
};

int run_fit_gp(const FitGpOpts& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const lab::Dataset raw = lab::load_csv(o.data, o.target);
  const auto stats = lab::compute_normalization(raw);
  const lab::Dataset d = lab::normalize(raw, stats.norm);
  const auto fit = fit_named_kernel(o.prior, d, o.c.iters.value_or(1000), o.c.lr.value_or(0.05));
  lab::ExperimentReport r;
  r.experiment = "fit-gp";
  r.seed = o.c.seed;
  r.config = {{"data", o.data}, {"target", raw.target_name}, {"prior", o.prior},
              {"iterations", o.c.iters.value_or(1000)}, {"learning_rate", o.c.lr.value_or(0.05)}};
  r.metadata["kernel"] = priors::kernel_to_json(fit.kernel);
  r.metadata["obs_variance_normalized"] = fit.obs_variance;
  r.metadata["units"] = "normalized inputs and targets";
  const auto names = fit.kernel.param_names();
  const auto logs = fit.kernel.log_params();
  for (std::size_t i = 0; i < names.size(); ++i) r.add("gp-" + o.prior, "", names[i], std::exp(logs[i]));
  r.add("gp-" + o.prior, "", "obs_variance", fit.obs_variance);
  r.add("gp-" + o.prior, "", "log_marginal_likelihood",
        priors::gp_log_marginal_likelihood(fit.kernel, d.x, d.y, fit.obs_variance).value);
  r.wall_clock_seconds = lab::detail::seconds_since(t0);
  for (const auto& m : r.metrics) std::cout << m.metric << " = " << m.value << '\n';
  return finish(r, o.c.out);
}

// --- train-fbnn / train-bbb -------------------------------------------------

struct TrainOpts {
  Common c;
  std::string data, target, prior = "rbf", obs, activation = "relu";
  std::size_t batch_size = 0;
  double anneal_fraction = 0.0;
};

int run_train(const TrainOpts& o, bool functional) {
  const auto t0 = std::chrono::steady_clock::now();
  const lab::Dataset raw = lab::load_csv(o.data, o.target);
  // Implicit piecewise priors live on the data's own [0,1] scale.
  const bool implicit = functional && !is_gp_prior(o.prior);
  std::optional<priors::PiecewiseFamily> family;
  if (implicit) family = piecewise_family(o.prior);
  vi::Normalization nz;
  if (implicit) {
    nz.x_mean = Vector::Zero(raw.x.cols());
    nz.x_std = Vector::Ones(raw.x.cols());
  } else {
    nz = lab::compute_normalization(raw).norm;
  }
  const lab::Dataset d = lab::normalize(raw, nz);

  lab::ExperimentReport r;
  r.experiment = functional ? "train-fbnn" : "train-bbb";
  r.seed = o.c.seed;
  vi::TrainConfig tc;
  tc.iterations = o.c.iters.value_or(2000);
  tc.learning_rate = o.c.lr.value_or(1e-3);
  tc.lambda = o.c.lambda;
  tc.gamma = o.c.gamma;
  tc.measure_points = o.c.measure_points.value_or(implicit ? 40 : 5);
  tc.draws = o.c.draws.value_or(10);
  tc.ssge_draws = 0;
  tc.bbb_draws = o.c.draws.value_or(10);
  tc.batch_size = o.batch_size;
  tc.anneal_horizon = static_cast<std::size_t>(o.anneal_fraction * static_cast<double>(tc.iterations));

  std::optional<vi::PriorSource> prior;
  std::optional<priors::GpFit> gp;
  if (functional && !implicit) {
    gp = fit_named_kernel(o.prior, d, 500, 0.05);
    prior = priors::GpPrior::with_default_jitter(gp->kernel);
    r.metadata["kernel"] = priors::kernel_to_json(gp->kernel);
    r.metadata["gp_obs_variance_normalized"] = gp->obs_variance;
  } else if (implicit) {
    priors::ImplicitPriorSpec spec;
    spec.family = *family;
    prior = vi::ImplicitScorePrior{spec, 100};
    tc.measure_box = vi::Box{Vector::Zero(1), Vector::Ones(1)};
    if (d.dim() != 1) throw UsageError("piecewise priors need one input column");
  }
  if (!o.obs.empty())
    tc.obs = parse_obs(o.obs, nz.y_std);
  else if (gp)
    tc.obs = vi::ObsModel::lower_bounded(gp->obs_variance);
  else
    tc.obs = vi::ObsModel::lower_bounded(0.0);

  Rng rng = lab::detail::cell_rng(o.c.seed, r.experiment);
  const std::string arch = o.c.arch.empty() ? "2x100" : o.c.arch;
  auto mlp = vi::init_mlp(vi::parse_arch(arch, d.dim(), 1), vi::parse_activation(o.activation), rng);
  const auto res = functional ? vi::train_fbnn(mlp, d.x, d.y, *prior, tc, rng) : vi::train_bbb(mlp, d.x, d.y, tc, rng);

  r.config = {{"data", o.data},
              {"target", raw.target_name},
              {"arch", arch},
              {"activation", o.activation},
              {"prior", functional ? o.prior : "weight-normal"},
              {"iterations", tc.iterations},
              {"learning_rate", tc.learning_rate},
              {"draws", tc.draws},
              {"measure_points", tc.measure_points},
              {"batch_size", tc.batch_size},
              {"anneal_fraction", o.anneal_fraction},
              {"obs", {{"trainable", tc.obs.trainable}, {"value", tc.obs.value}}}};
  r.config["lambda"] = tc.lambda ? json(*tc.lambda) : json(nullptr);
  r.config["gamma"] = tc.gamma ? json(*tc.gamma) : json(nullptr);
  r.metadata["normalization"] = {{"x_mean", std::vector<double>(nz.x_mean.begin(), nz.x_mean.end())},
                                 {"x_std", std::vector<double>(nz.x_std.begin(), nz.x_std.end())},
                                 {"y_mean", nz.y_mean},
                                 {"y_std", nz.y_std}};

  Rng prng = lab::detail::cell_rng(o.c.seed, "predict");
  const auto pred = vi::predict(mlp, raw.x, 200, prng, nz);
  const std::string method = functional ? "fbnn" : "bbb";
  r.add(method, arch, "train_rmse", lab::detail::rmse(pred.mean.col(0), raw.y));
  r.add(method, arch, "final_loglik", res.trace.empty() ? 0.0 : res.trace.back().loglik);
  r.add(method, arch, "obs_variance", res.obs.variance() * nz.y_std * nz.y_std);
  if (raw.dim() == 1) {
    const double lo = raw.x.minCoeff(), hi = raw.x.maxCoeff(), w = std::max(hi - lo, 1e-9);
    const Matrix grid = lab::detail::linspace_column(lo - w / 2, hi + w / 2, 201);
    const auto g = vi::predict(mlp, grid, 200, prng, nz);
    lab::detail::add_grid(r, method, arch, grid, g.mean.col(0), g.std.col(0));
  }
  vi::Checkpoint ck{mlp, res.obs, r.config, o.c.seed, tc.iterations};
  vi::save_checkpoint(std::filesystem::path(o.c.out) / "checkpoint", ck);
  r.wall_clock_seconds = lab::detail::seconds_since(t0);
  return finish(r, o.c.out);
}

// --- toys ---------------------------------------------------------------------

int run_toy(const std::string& which, const Common& c, const std::string& prior) {
  if (which == "cubic") {
    lab::CubicConfig cfg;
    cfg.seed = c.seed;
    apply(c, cfg.budget);
    if (!c.arch.empty()) cfg.archs = split_list(c.arch);
    return finish(lab::run_toy_cubic(cfg), c.out);
  }
  if (which == "periodic") {
    lab::PeriodicConfig cfg;
    cfg.seed = c.seed;
    apply(c, cfg.budget);
    if (!c.arch.empty()) cfg.arch = c.arch;
    return finish(lab::run_periodic(cfg), c.out);
  }
  if (which == "implicit") {
    lab::ImplicitConfig cfg;
    cfg.seed = c.seed;
    cfg.prior.family = piecewise_family(prior.empty() ? "piecewise-const" : prior);
    apply(c, cfg.budget);
    if (!c.arch.empty()) cfg.arch = c.arch;
    return finish(lab::run_implicit(cfg), c.out);
  }
  throw UsageError("unknown toy '" + which + "' (cubic, periodic, implicit)");
}

// --- regress ------------------------------------------------------------------

struct RegressOpts {
  Common c;
  std::string data, target, name, methods = "fbnn,bbb";
  std::size_t splits = 10;
};

int run_regress(const RegressOpts& o) {
  lab::RegressionConfig cfg;
  cfg.seed = o.c.seed;
  cfg.data = o.data;
  cfg.target = o.target;
  cfg.name = o.name;
  cfg.splits = o.splits;
  cfg.methods = split_list(o.methods);
  if (!o.c.arch.empty()) cfg.arch = o.c.arch;
  if (o.c.iters) cfg.epochs = *o.c.iters;
  if (o.c.lr) cfg.learning_rate = *o.c.lr;
  cfg.lambda = o.c.lambda;
  cfg.gamma = o.c.gamma;
  if (o.c.measure_points) cfg.measure_points = *o.c.measure_points;
  if (o.c.draws) cfg.draws = cfg.bbb_draws = *o.c.draws;
  const auto r = lab::run_regression(cfg);
  for (const auto& s : r.summary)
    std::cout << s.dataset << ' ' << s.method << " rmse " << s.rmse_mean << " +- " << s.rmse_se << "  ll " << s.ll_mean
              << " +- " << s.ll_se << "  (" << s.runs << " runs)\n";
  return finish(r, o.c.out);
}

// --- oracle -------------------------------------------------------------------

struct OracleOpts {
  Common c;
  double eta = 1.0, nu = 1.0;
  std::size_t n = 10, depth = 10, dim = 3;
};

int run_oracle(const std::string& which, const OracleOpts& o) {
  Rng rng(o.c.seed, lab::detail::stream_id("oracle/" + which));
  json out{{"oracle", which}, {"seed", o.c.seed}, {"git_describe", FVI_GIT_DESCRIBE}};
  std::cout.precision(17);
  if (which == "felbo-id") {
    const auto inst = lab::random_felbo_instance(rng);
    const auto q = lab::random_gaussian(inst.x.rows(), rng);
    const auto id = lab::gp_oracle_felbo(q, inst);
    std::cout << "L_X          " << id.elbo << "\nlog p(D)     " << id.log_evidence << "\nKL           " << id.kl
              << "\nresidual     " << id.residual() << '\n';
    out["result"] = {{"elbo", id.elbo}, {"log_evidence", id.log_evidence}, {"kl", id.kl}, {"residual", id.residual()},
                     {"points", inst.x.rows()}, {"data", inst.y.size()}};
  } else if (which == "linear-kl") {
    if (o.dim < 1 || o.dim > 50) throw UsageError("--dim must be in [1, 50]");
    const auto d = static_cast<Eigen::Index>(o.dim);
    const auto q = lab::random_gaussian(d, rng), p = lab::random_gaussian(d, rng);
    const Matrix x = standard_normal(d + 2, d, rng);
    const auto kl = lab::linear_kl_oracle(q, p, x);
    std::cout << "KL weights   " << kl.weight_kl << "\nKL functions " << kl.function_kl << "\ndifference   "
              << kl.weight_kl - kl.function_kl << '\n';
    out["result"] = {{"weight_kl", kl.weight_kl}, {"function_kl", kl.function_kl}, {"dim", o.dim}};
  } else if (which == "addition") {
    const auto spec = lab::make_deep_addition(o.eta, o.nu, o.n, o.depth, rng);
    const auto cf = lab::deep_addition_oracle(spec);
    const auto fit = lab::deep_addition_train(spec, lab::AdditionMethod::kFactorizedWeight, o.c.iters.value_or(20000),
                                              o.c.lr.value_or(0.02));
    std::cout << "functional   N(" << cf.functional.mean << ", " << cf.functional.variance << ")\n"
              << "weight-space N(" << cf.weight_space.mean << ", " << cf.weight_space.variance << ")\n"
              << "trained      N(" << fit.aggregate.mean << ", " << fit.aggregate.variance << ")\n";
    out["result"] = {{"functional", {cf.functional.mean, cf.functional.variance}},
                     {"weight_space", {cf.weight_space.mean, cf.weight_space.variance}},
                     {"trained", {fit.aggregate.mean, fit.aggregate.variance}},
                     {"eta", o.eta}, {"nu", o.nu}, {"n", o.n}, {"depth", o.depth}};
  } else {
    throw UsageError("unknown oracle '" + which + "' (felbo-id, linear-kl, addition)");
  }
  if (!o.c.out.empty()) {
    std::filesystem::create_directories(o.c.out);
    std::ofstream(std::filesystem::path(o.c.out) / "manifest.json") << out.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fvi: functional variational inference lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FVI_GIT_DESCRIBE);

  FitGpOpts fg;
  auto* fit_gp = app.add_subcommand("fit-gp", "Fit GP hyperparameters by marginal likelihood");
  add_common(fit_gp, fg.c);
  fit_gp->add_option("--data", fg.data, "CSV with header row")->required()->check(CLI::ExistingFile);
  fit_gp->add_option("--target", fg.target, "Target column (default: last)");
  fit_gp->add_option("--prior", fg.prior, "Kernel")->check(CLI::IsMember({"rbf", "per-rbf", "matern12"}));

  TrainOpts tf, tb;
  auto* train_fbnn = app.add_subcommand("train-fbnn", "Train a functional BNN on a CSV dataset");
  auto* train_bbb = app.add_subcommand("train-bbb", "Train a Bayes-by-backprop BNN on a CSV dataset");
  for (auto [cmd, o] : {std::pair{train_fbnn, &tf}, std::pair{train_bbb, &tb}}) {
    add_common(cmd, o->c);
    cmd->add_option("--data", o->data, "CSV with header row")->required()->check(CLI::ExistingFile);
    cmd->add_option("--target", o->target, "Target column (default: last)");
    cmd->add_option("--arch", o->c.arch, "Hidden layers, e.g. 2x100 or 50,50");
    cmd->add_option("--obs-var", o->obs, "fixed:v or trainable:floor (original target units)");
    cmd->add_option("--batch-size", o->batch_size, "Mini-batch size (0: full batch)");
    cmd->add_option("--anneal", o->anneal_fraction, "Fraction of iterations over which the KL weight ramps up")
        ->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--activation", o->activation, "relu or tanh")->check(CLI::IsMember({"relu", "tanh"}));
  }
  train_fbnn->add_option("--prior", tf.prior, "Functional prior")
      ->check(CLI::IsMember({"rbf", "per-rbf", "matern12", "piecewise-const", "piecewise-lin"}));

  Common toy_opts;
  std::string toy_name, toy_prior;
  auto* toy = app.add_subcommand("toy", "Run a 1-D toy study: cubic, periodic or implicit");
  toy->add_option("name", toy_name, "cubic | periodic | implicit")
      ->required()
      ->check(CLI::IsMember({"cubic", "periodic", "implicit"}));
  add_common(toy, toy_opts);
  toy->add_option("--arch", toy_opts.arch, "Architecture (cubic: comma-separated list)");
  toy->add_option("--prior", toy_prior, "Implicit prior family")
      ->check(CLI::IsMember({"piecewise-const", "piecewise-lin"}));

  RegressOpts ro;
  auto* regress = app.add_subcommand("regress", "fBNN vs BBB over random train/test splits");
  add_common(regress, ro.c);
  regress->add_option("--data", ro.data, "CSV with header row")->required()->check(CLI::ExistingFile);
  regress->add_option("--target", ro.target, "Target column (default: last)");
  regress->add_option("--name", ro.name, "Dataset tag (default: file stem)");
  regress->add_option("--splits", ro.splits, "Number of 90/10 splits")->check(CLI::PositiveNumber);
  regress->add_option("--methods", ro.methods, "Comma-separated subset of fbnn,bbb");
  regress->add_option("--arch", ro.c.arch, "Hidden layers (default 1x50)");

  OracleOpts oo;
  std::string oracle_name;
  auto* oracle = app.add_subcommand("oracle", "Closed-form Gaussian checks");
  oracle->add_option("name", oracle_name, "felbo-id | linear-kl | addition")
      ->required()
      ->check(CLI::IsMember({"felbo-id", "linear-kl", "addition"}));
  add_common(oracle, oo.c, false);
  oracle->add_option("--eta", oo.eta, "Prior std per unit (addition)")->check(CLI::PositiveNumber);
  oracle->add_option("--nu", oo.nu, "Noise std (addition)")->check(CLI::PositiveNumber);
  oracle->add_option("--n", oo.n, "Data points (addition)")->check(CLI::PositiveNumber);
  oracle->add_option("--depth", oo.depth, "Layers L (addition)")->check(CLI::PositiveNumber);
  oracle->add_option("--dim", oo.dim, "Weight dimension (linear-kl)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*fit_gp) return run_fit_gp(fg);
    if (*train_fbnn) return run_train(tf, true);
    if (*train_bbb) return run_train(tb, false);
    if (*toy) return run_toy(toy_name, toy_opts, toy_prior);
    if (*regress) return run_regress(ro);
    if (*oracle) return run_oracle(oracle_name, oo);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fvi: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
