#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"
#include "fvi/numcore/rng.hpp"
#include "fvi/priors/gp.hpp"
#include "fvi/priors/implicit.hpp"
#include "fvi/ssge/ssge.hpp"
#include "fvi/vi/adam.hpp"
#include "fvi/vi/mlp.hpp"

namespace fvi::vi {

inline constexpr double kObsVarianceFloor = 1e-6;

/// Linear KL warm-up: min(1, iteration / horizon); horizon 0 means no warm-up.
inline double anneal(std::size_t iteration, std::size_t horizon) {
  if (horizon == 0) return 1.0;
  return std::min(1.0, static_cast<double>(iteration) / static_cast<double>(horizon));
}

/// Axis-aligned sampling region for measurement points.
struct Box {
  Vector lo, hi;
};

/// Training rectangle expanded by half its width on each side; zero-width
/// coordinates expand by +-0.5.
inline Box measurement_box(const Matrix& train_x) {
  if (train_x.rows() == 0) throw PreconditionError("measurement_box: no training inputs");
  Box b{train_x.colwise().minCoeff().transpose(), train_x.colwise().maxCoeff().transpose()};
  for (Eigen::Index c = 0; c < b.lo.size(); ++c) {
    const double d = b.hi(c) - b.lo(c);
    const double pad = d > 0.0 ? 0.5 * d : 0.5;
    b.lo(c) -= pad;
    b.hi(c) += pad;
  }
  return b;
}

inline Matrix sample_uniform_box(const Box& box, std::size_t count, Rng& rng) {
  if (box.lo.size() != box.hi.size()) throw DimensionError("sample_uniform_box: bound size mismatch");
  Matrix out(static_cast<Eigen::Index>(count), box.lo.size());
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) = rng.uniform(box.lo(c), box.hi(c));
  return out;
}

inline Matrix sample_measurement_points(const Matrix& train_x, std::size_t count, Rng& rng) {
  return sample_uniform_box(measurement_box(train_x), count, rng);
}

/// Training rows (with targets) plus random measurement rows. The combined
/// input stacks measurement rows first.
struct MeasurementBatch {
  Matrix x_measure;
  Matrix x_data;
  Vector y;

  std::size_t measure_count() const { return static_cast<std::size_t>(x_measure.rows()); }
  std::size_t data_count() const { return static_cast<std::size_t>(x_data.rows()); }

  void validate() const {
    if (x_data.rows() != y.size()) throw DimensionError("MeasurementBatch: target count mismatch");
    if (x_measure.rows() + x_data.rows() == 0) throw PreconditionError("MeasurementBatch: empty batch");
    if (x_measure.rows() > 0 && x_data.rows() > 0 && x_measure.cols() != x_data.cols())
      throw DimensionError("MeasurementBatch: input dimension mismatch");
  }

  Matrix combined() const {
    if (x_measure.rows() == 0) return x_data;
    if (x_data.rows() == 0) return x_measure;
    Matrix x(x_measure.rows() + x_data.rows(), x_data.cols());
    x << x_measure, x_data;
    return x;
  }
};

/// Sum over the batch of log N(y; f, v), averaged over the rows of f (k x n).
inline double gaussian_log_likelihood(const Vector& y, const Matrix& f, double obs_variance) {
  if (f.cols() != y.size()) throw DimensionError("gaussian_log_likelihood: size mismatch");
  const double v = std::max(obs_variance, kObsVarianceFloor);
  const double norm = -0.5 * std::log(2.0 * std::numbers::pi * v);
  double total = 0.0;
  for (Eigen::Index s = 0; s < f.rows(); ++s)
    total += static_cast<double>(y.size()) * norm - 0.5 * (f.row(s).transpose() - y).squaredNorm() / v;
  return f.rows() > 0 ? total / static_cast<double>(f.rows()) : 0.0;
}

/// Observation variance: fixed, or floor + softplus(raw) with raw trained.
struct ObsModel {
  bool trainable = false;
  double value = 1.0;  // fixed variance, or the floor when trainable
  double raw = -5.0;

  static ObsModel fixed(double v) {
    if (!(v > 0.0)) throw DomainError("ObsModel: variance must be positive");
    return ObsModel{false, v, 0.0};
  }
  static ObsModel lower_bounded(double floor, double raw = -5.0) {
    if (!(floor >= 0.0)) throw DomainError("ObsModel: floor must be nonnegative");
    return ObsModel{true, floor, raw};
  }
  double variance() const {
    return std::max(trainable ? value + fvi::detail::softplus(raw) : value, kObsVarianceFloor);
  }
};

/// Implicit prior accessed only through samples.
struct ImplicitScorePrior {
  priors::ImplicitPriorSpec spec;
  std::size_t draws = 100;
};

using PriorSource = std::variant<priors::GpPrior, ImplicitScorePrior>;

/// Injected-noise std: for GP priors the prior's own jitter, otherwise 1e-3
/// of the value range.
inline double default_gamma(const PriorSource& prior) {
  if (const auto* gp = std::get_if<priors::GpPrior>(&prior)) return std::sqrt(gp->jitter);
  const auto& s = std::get<ImplicitScorePrior>(prior).spec;
  return 1e-3 * (s.value_hi - s.value_lo);
}

/// Per-draw cotangent (grad_f log q - grad_f log p) / k at noisy function
/// values. q scores come from SSGE on the (noisy) draws, or on `q_samples`
/// when given. GP prior scores are exact with kernel jitter gamma^2.
inline Matrix kl_grad_cotangent(const Matrix& f, const Matrix& x, const PriorSource& prior, double gamma,
                                const ssge::SsgeConfig& config, Rng& rng,
                                const std::optional<Matrix>& q_samples = std::nullopt) {
  if (f.rows() < 2) throw PreconditionError("kl_grad_cotangent: need at least two draws");
  if (f.cols() != x.rows()) throw DimensionError("kl_grad_cotangent: draws do not match inputs");
  if (gamma < 0.0) throw DomainError("kl_grad_cotangent: negative gamma");
  auto noisy = [&](const Matrix& m) {
    if (gamma == 0.0) return m;
    return Matrix(m + gamma * standard_normal(m.rows(), m.cols(), rng));
  };
  const Matrix fq = noisy(f);
  const Matrix q_score =
      q_samples ? ssge::SsgeEstimator::fit(noisy(*q_samples), config).estimate_score(fq)
                : ssge::SsgeEstimator::fit(fq, config).estimate_score(fq);
  Matrix p_score;
  if (const auto* gp = std::get_if<priors::GpPrior>(&prior)) {
    priors::GpPrior g = *gp;
    g.jitter = gamma * gamma;
    p_score = priors::gp_score(g, x, fq).score;
  } else {
    const auto& imp = std::get<ImplicitScorePrior>(prior);
    const Matrix draws = noisy(priors::implicit_prior_draws(imp.spec, x, imp.draws, rng));
    p_score = ssge::SsgeEstimator::fit(draws, config).estimate_score(fq);
  }
  return (q_score - p_score) / static_cast<double>(f.rows());
}

/// Per-step fELBO knobs.
struct FelboConfig {
  double lambda = 1.0;
  std::size_t draws = 20;
  std::size_t ssge_draws = 100;  // 0: fit q scores on the training draws
  double gamma = 0.0;
  ssge::SsgeConfig ssge;
  double anneal = 1.0;
  double learning_rate = 1e-3;
};

struct StepDiagnostics {
  double loglik = 0.0;        // mean over training rows, averaged over draws
  double loglik_cot_norm = 0.0;
  double kl_cot_norm = 0.0;   // unweighted KL cotangent
  double kl_term_norm = 0.0;  // anneal * lambda * KL cotangent
  double kl = 0.0;            // BBB only: weight-space KL
  double obs_variance = 0.0;
};

namespace detail {

inline std::vector<std::span<double>> groups_with_obs(StochasticMlp& mlp, ObsModel& obs) {
  auto g = mlp.parameter_groups();
  if (obs.trainable) g.emplace_back(&obs.raw, 1);
  return g;
}

/// Descent on -grad for the network groups plus the optional obs group.
inline void apply_ascent(StochasticMlp& mlp, ObsModel& obs, std::vector<std::vector<double>> ascent,
                         double obs_grad, AdamState& adam, double lr) {
  if (obs.trainable) ascent.push_back({obs_grad});
  for (auto& g : ascent)
    for (auto& v : g) v = -v;
  auto params = groups_with_obs(mlp, obs);
  std::vector<std::span<const double>> grads(ascent.begin(), ascent.end());
  adam_update(adam, params, grads, lr);
}

/// d/d raw of the summed log-likelihood weighted by `weight`.
inline double obs_raw_gradient(const ObsModel& obs, const Matrix& resid, double weight) {
  if (!obs.trainable) return 0.0;
  const double v = obs.variance();
  const double per = -0.5 * static_cast<double>(resid.size()) / v + 0.5 * resid.squaredNorm() / (v * v);
  return weight * per * fvi::detail::sigmoid(obs.raw);
}

}  // namespace detail

/// One fELBO ascent step: a single backward pass of the function draws with
/// cotangent d(mean loglik)/df - anneal * lambda * (score_q - score_p) / k.
inline StepDiagnostics felbo_step(StochasticMlp& mlp, const MeasurementBatch& batch, const PriorSource& prior,
                                  const FelboConfig& cfg, ObsModel& obs, Rng& rng, AdamState& adam) {
  batch.validate();
  if (mlp.output_dim() != 1) throw PreconditionError("felbo_step: single-output networks only");
  if (cfg.draws < 2) throw PreconditionError("felbo_step: need at least two draws");
  const Matrix x = batch.combined();
  const auto nd = static_cast<Eigen::Index>(batch.data_count());
  const double k = static_cast<double>(cfg.draws);

  FunctionDraws draws = sample_functions(mlp, x, cfg.draws, rng);
  const Matrix f = draws.as_matrix();

  StepDiagnostics d;
  d.obs_variance = obs.variance();
  Matrix cot = Matrix::Zero(f.rows(), f.cols());
  double obs_grad = 0.0;
  if (nd > 0) {
    const Matrix fd = f.rightCols(nd);
    const Matrix resid = (-fd).rowwise() + batch.y.transpose();
    d.loglik = gaussian_log_likelihood(batch.y, fd, d.obs_variance) / static_cast<double>(nd);
    cot.rightCols(nd) = resid / (d.obs_variance * k * static_cast<double>(nd));
    d.loglik_cot_norm = cot.norm();
    obs_grad = detail::obs_raw_gradient(obs, resid, 1.0 / (k * static_cast<double>(nd)));
  }

  std::optional<Matrix> q_samples;
  if (cfg.ssge_draws > 0) q_samples = sample_functions(mlp, x, cfg.ssge_draws, rng, false).as_matrix();
  const Matrix kl = kl_grad_cotangent(f, x, prior, cfg.gamma, cfg.ssge, rng, q_samples);
  d.kl_cot_norm = kl.norm();
  const double w = cfg.anneal * cfg.lambda;
  d.kl_term_norm = w * d.kl_cot_norm;
  cot -= w * kl;
  if (!cot.allFinite()) throw NumericalError("felbo_step: non-finite cotangent");

  const std::vector<double> flat = fvi::vi::detail::to_row_major(cot);
  draws.tape->backward(draws.values, flat);
  detail::apply_ascent(mlp, obs, draws.gradients(), obs_grad, adam, cfg.learning_rate);
  return d;
}

/// Sum over dimensions of KL(N(mu1, s1^2) || N(mu2, s2^2)).
inline double gaussian_kl_diag(std::span<const double> mu1, std::span<const double> s1,
                               std::span<const double> mu2, std::span<const double> s2) {
  if (mu1.size() != s1.size() || mu1.size() != mu2.size() || mu1.size() != s2.size())
    throw DimensionError("gaussian_kl_diag: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu1.size(); ++i) {
    if (!(s1[i] > 0.0) || !(s2[i] > 0.0)) throw DomainError("gaussian_kl_diag: non-positive scale");
    const double r = s1[i] / s2[i];
    const double dm = (mu1[i] - mu2[i]) / s2[i];
    kl += 0.5 * (r * r + dm * dm - 1.0) - std::log(r);
  }
  return kl;
}

/// KL(q(w) || N(0, s^2 I)) over every weight and bias.
inline double weight_kl(const StochasticMlp& mlp, double prior_scale) {
  double kl = 0.0;
  auto add = [&](const std::vector<double>& mu, const std::vector<double>& rho) {
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const double s = fvi::detail::softplus(rho[i]);
      const std::array<double, 1> m1{mu[i]}, s1{s}, m2{0.0}, s2{prior_scale};
      kl += gaussian_kl_diag(m1, s1, m2, s2);
    }
  };
  for (const auto& l : mlp.layers) {
    add(l.w_mu, l.w_rho);
    add(l.b_mu, l.b_rho);
  }
  return kl;
}

struct BbbConfig {
  double prior_scale = 1.0;
  std::size_t dataset_size = 0;  // |D|; 0 means the batch size
  std::size_t draws = 1;
  double anneal = 1.0;
  double learning_rate = 1e-3;
};

/// Bayes-by-backprop step: reparameterized mean log-likelihood gradient minus
/// anneal * KL(q || N(0, s^2)) / |D| with the KL gradient in closed form.
inline StepDiagnostics bbb_step(StochasticMlp& mlp, const Matrix& x, const Vector& y, const BbbConfig& cfg,
                                ObsModel& obs, Rng& rng, AdamState& adam) {
  if (x.rows() == 0) throw PreconditionError("bbb_step: empty batch");
  if (x.rows() != y.size()) throw DimensionError("bbb_step: target count mismatch");
  if (!(cfg.prior_scale > 0.0)) throw DomainError("bbb_step: prior scale must be positive");
  const double k = static_cast<double>(cfg.draws);
  const double nb = static_cast<double>(x.rows());
  const double nfull = cfg.dataset_size > 0 ? static_cast<double>(cfg.dataset_size) : nb;

  FunctionDraws draws = sample_functions(mlp, x, cfg.draws, rng);
  const Matrix f = draws.as_matrix();
  StepDiagnostics d;
  d.obs_variance = obs.variance();
  const Matrix resid = (-f).rowwise() + y.transpose();
  d.loglik = gaussian_log_likelihood(y, f, d.obs_variance) / nb;
  const Matrix cot = resid / (d.obs_variance * k * nb);
  d.loglik_cot_norm = cot.norm();
  d.kl = weight_kl(mlp, cfg.prior_scale);
  draws.tape->backward(draws.values, fvi::vi::detail::to_row_major(cot));
  auto grads = draws.gradients();

  const double c = cfg.anneal / nfull;
  const double s2 = cfg.prior_scale * cfg.prior_scale;
  double kl_norm2 = 0.0;
  for (std::size_t li = 0; li < mlp.layers.size(); ++li) {
    const auto& l = mlp.layers[li];
    auto pull = [&](const std::vector<double>& mu, const std::vector<double>& rho, std::vector<double>& gmu,
                    std::vector<double>& grho) {
      for (std::size_t i = 0; i < mu.size(); ++i) {
        const double s = fvi::detail::softplus(rho[i]);
        const double dmu = mu[i] / s2;
        const double drho = (s / s2 - 1.0 / s) * fvi::detail::sigmoid(rho[i]);
        gmu[i] -= c * dmu;
        grho[i] -= c * drho;
        kl_norm2 += c * c * (dmu * dmu + drho * drho);
      }
    };
    pull(l.w_mu, l.w_rho, grads[4 * li], grads[4 * li + 1]);
    pull(l.b_mu, l.b_rho, grads[4 * li + 2], grads[4 * li + 3]);
  }
  d.kl_term_norm = std::sqrt(kl_norm2);
  const double obs_grad = detail::obs_raw_gradient(obs, resid, 1.0 / (k * nb));
  detail::apply_ascent(mlp, obs, std::move(grads), obs_grad, adam, cfg.learning_rate);
  return d;
}

}  // namespace fvi::vi
