#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"
#include "fvi/numcore/rng.hpp"
#include "fvi/priors/gp.hpp"
#include "fvi/vi/adam.hpp"

// Closed-form harnesses: every quantity here is an exact Gaussian expectation,
// so identities between them can be checked to near machine precision.

namespace fvi::lab {

struct Gaussian {
  Vector mean;
  Matrix cov;

  Eigen::Index dim() const { return mean.size(); }
};

namespace detail {

constexpr double kLog2Pi = 1.8378770664093454836;

/// Cholesky without jitter; oracles must not silently perturb covariances.
inline Eigen::LLT<Matrix> exact_llt(const Matrix& a, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all())
    throw NumericalError(std::string(what) + ": covariance is not positive definite", 0.0);
  return llt;
}

inline double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

}  // namespace detail

/// KL(q || p) for full-covariance Gaussians.
inline double gaussian_kl(const Gaussian& q, const Gaussian& p) {
  if (q.dim() != p.dim() || q.cov.rows() != q.dim() || p.cov.rows() != p.dim())
    throw DimensionError("gaussian_kl: dimension mismatch");
  const auto lq = detail::exact_llt(q.cov, "gaussian_kl");
  const auto lp = detail::exact_llt(p.cov, "gaussian_kl");
  const Vector dm = p.mean - q.mean;
  const double trace = lp.solve(q.cov).trace();
  const double maha = dm.dot(lp.solve(dm));
  return 0.5 * (trace + maha - static_cast<double>(q.dim()) + detail::log_det(lp) - detail::log_det(lq));
}

// ---------------------------------------------------------------------------
// fELBO with the training inputs inside the measurement set.

/// GP regression problem restricted to a finite measurement set X. The
/// training inputs are rows `data_rows` of X (aligned with y).
struct FelboOracleInstance {
  priors::GpPrior prior{priors::KernelSpec::rbf(1.0, 1.0)};
  Matrix x;
  std::vector<std::size_t> data_rows;
  Vector y;
  double obs_variance = 1.0;

  void validate() const {
    if (x.rows() < 1) throw PreconditionError("felbo oracle: empty measurement set");
    if (data_rows.size() != static_cast<std::size_t>(y.size()))
      throw DimensionError("felbo oracle: one data row per target required");
    for (auto r : data_rows)
      if (r >= static_cast<std::size_t>(x.rows())) throw PreconditionError("felbo oracle: data row outside X");
    if (!(obs_variance > 0.0)) throw DomainError("felbo oracle: obs variance must be positive");
  }

  Matrix prior_cov() const { return priors::prior_covariance(prior, x); }
  Vector prior_mean() const { return Vector::Constant(x.rows(), prior.mean); }
};

struct FelboIdentity {
  double elbo = 0.0;          // L_X
  double log_evidence = 0.0;  // log p(D)
  double kl = 0.0;            // KL(q || p(f^X | D))

  double residual() const { return elbo - (log_evidence - kl); }
};

/// Exact posterior over f^X given the data, via the data-block Schur complement.
inline Gaussian function_posterior(const FelboOracleInstance& inst) {
  inst.validate();
  const Matrix k = inst.prior_cov();
  const auto nd = static_cast<Eigen::Index>(inst.data_rows.size());
  Gaussian post{inst.prior_mean(), k};
  if (nd == 0) return post;
  Matrix kxd(k.rows(), nd), kdd(nd, nd);
  Vector resid(nd);
  for (Eigen::Index j = 0; j < nd; ++j) {
    const auto rj = static_cast<Eigen::Index>(inst.data_rows[static_cast<std::size_t>(j)]);
    kxd.col(j) = k.col(rj);
    resid(j) = inst.y(j) - inst.prior.mean;
    for (Eigen::Index i = 0; i < nd; ++i) kdd(i, j) = k(static_cast<Eigen::Index>(inst.data_rows[static_cast<std::size_t>(i)]), rj);
  }
  kdd.diagonal().array() += inst.obs_variance;
  const auto llt = detail::exact_llt(kdd, "function_posterior");
  post.mean += kxd * llt.solve(resid);
  post.cov = detail::symmetrize(k - kxd * llt.solve(Matrix(kxd.transpose())));
  return post;
}

/// log N(y; m, K_DD + v I).
inline double gp_log_evidence(const FelboOracleInstance& inst) {
  inst.validate();
  const auto nd = static_cast<Eigen::Index>(inst.data_rows.size());
  if (nd == 0) return 0.0;
  const Matrix k = inst.prior_cov();
  Matrix c(nd, nd);
  for (Eigen::Index i = 0; i < nd; ++i)
    for (Eigen::Index j = 0; j < nd; ++j)
      c(i, j) = k(static_cast<Eigen::Index>(inst.data_rows[static_cast<std::size_t>(i)]),
                  static_cast<Eigen::Index>(inst.data_rows[static_cast<std::size_t>(j)]));
  c.diagonal().array() += inst.obs_variance;
  const auto llt = detail::exact_llt(c, "gp_log_evidence");
  const Vector r = (inst.y.array() - inst.prior.mean).matrix();
  return -0.5 * (r.dot(llt.solve(r)) + detail::log_det(llt) + static_cast<double>(nd) * detail::kLog2Pi);
}

/// L_X = E_q log p(y | f^D) + E_q log p(f^X) - E_q log q(f^X), all in closed form.
inline double felbo_closed_form(const Gaussian& q, const FelboOracleInstance& inst) {
  inst.validate();
  const Eigen::Index n = inst.x.rows();
  if (q.dim() != n || q.cov.rows() != n || q.cov.cols() != n) throw DimensionError("felbo oracle: q has wrong size");
  const double v = inst.obs_variance;
  double ell = 0.0;
  for (std::size_t i = 0; i < inst.data_rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(inst.data_rows[i]);
    const double e = inst.y(static_cast<Eigen::Index>(i)) - q.mean(r);
    ell += -0.5 * (detail::kLog2Pi + std::log(v)) - 0.5 * (e * e + q.cov(r, r)) / v;
  }
  const auto lk = detail::exact_llt(inst.prior_cov(), "felbo oracle prior");
  const auto lq = detail::exact_llt(q.cov, "felbo oracle q");
  const Vector dm = q.mean - inst.prior_mean();
  const double nn = static_cast<double>(n);
  const double cross = -0.5 * (nn * detail::kLog2Pi + detail::log_det(lk) + lk.solve(q.cov).trace() + dm.dot(lk.solve(dm)));
  const double entropy = 0.5 * (nn * detail::kLog2Pi + detail::log_det(lq) + nn);
  return ell + cross + entropy;
}

/// The three quantities of the Gaussian-family fELBO identity, each from its
/// own closed-form path.
inline FelboIdentity gp_oracle_felbo(const Gaussian& q, const FelboOracleInstance& inst) {
  return {felbo_closed_form(q, inst), gp_log_evidence(inst), gaussian_kl(q, function_posterior(inst))};
}

/// Random instance: d in {1, 2}, n <= max_data training points, |X| <= max_points.
inline FelboOracleInstance random_felbo_instance(Rng& rng, std::size_t max_data = 10, std::size_t max_points = 20) {
  FelboOracleInstance inst;
  const auto d = static_cast<Eigen::Index>(1 + rng.uniform() * 2.0);
  const auto nd = static_cast<std::size_t>(1 + rng.uniform() * static_cast<double>(max_data));
  const std::size_t extra = static_cast<std::size_t>(rng.uniform() * static_cast<double>(max_points - nd + 1));
  const std::size_t total = nd + extra;
  inst.x.resize(static_cast<Eigen::Index>(total), d);
  for (Eigen::Index i = 0; i < inst.x.size(); ++i) inst.x.data()[i] = rng.uniform(-3.0, 3.0);
  std::vector<std::size_t> rows(total);
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  inst.data_rows.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nd));
  const double variance = rng.uniform(0.5, 2.0);
  const double lengthscale = rng.uniform(0.5, 2.0);
  // Injected noise keeps K well conditioned for any |X|.
  inst.prior = priors::GpPrior{priors::KernelSpec::rbf(variance, lengthscale), rng.uniform(-1.0, 1.0),
                               1e-2 * variance};
  inst.obs_variance = rng.uniform(0.05, 1.0);
  inst.y.resize(static_cast<Eigen::Index>(nd));
  for (Eigen::Index i = 0; i < inst.y.size(); ++i) inst.y(i) = 2.0 * rng.normal();
  return inst;
}

/// Arbitrary well-conditioned Gaussian of dimension n.
inline Gaussian random_gaussian(Eigen::Index n, Rng& rng, double floor = 0.1) {
  Gaussian g;
  g.mean = standard_normal(n, 1, rng).col(0);
  const Matrix a = standard_normal(n, n, rng) / std::sqrt(static_cast<double>(n));
  g.cov = detail::symmetrize(a * a.transpose() + floor * Matrix::Identity(n, n));
  return g;
}

// ---------------------------------------------------------------------------
// Exact ascent of L_X over Gaussian q.

struct AscentResult {
  Gaussian q;
  std::vector<double> objective;  // L_X before each update, then the final value
  double final_kl = 0.0;
};

/// Natural-gradient ascent on L_X with exact gradients. In natural
/// coordinates (Lambda m, Lambda) one step with rate a moves q a fraction a of
/// the way toward the stationary point, so KL(q || posterior) and hence
/// -L_X decrease monotonically for a in (0, 1].
inline AscentResult felbo_ascent(const FelboOracleInstance& inst, Gaussian q, double rate = 0.5,
                                 std::size_t iterations = 200, double tolerance = 1e-12) {
  if (!(rate > 0.0 && rate <= 1.0)) throw PreconditionError("felbo_ascent: rate must be in (0, 1]");
  inst.validate();
  const Eigen::Index n = inst.x.rows();
  const auto lk = detail::exact_llt(inst.prior_cov(), "felbo_ascent");
  const Matrix kinv = lk.solve(Matrix(Matrix::Identity(n, n)));
  const Vector mu = inst.prior_mean();
  // d L / d Sigma = -(K^-1 + D/v)/2 + Sigma^-1/2, so the target precision is fixed.
  Matrix target = kinv;
  Vector target_shift = kinv * mu;
  for (std::size_t i = 0; i < inst.data_rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(inst.data_rows[i]);
    target(r, r) += 1.0 / inst.obs_variance;
    target_shift(r) += inst.y(static_cast<Eigen::Index>(i)) / inst.obs_variance;
  }
  const Gaussian post = function_posterior(inst);
  AscentResult res;
  for (std::size_t it = 0; it < iterations; ++it) {
    res.objective.push_back(felbo_closed_form(q, inst));
    const auto lq = detail::exact_llt(q.cov, "felbo_ascent");
    Matrix prec = lq.solve(Matrix(Matrix::Identity(n, n)));
    Vector shift = prec * q.mean;
    prec = detail::symmetrize((1.0 - rate) * prec + rate * target);
    shift = (1.0 - rate) * shift + rate * target_shift;
    const auto lp = detail::exact_llt(prec, "felbo_ascent");
    q.cov = detail::symmetrize(lp.solve(Matrix(Matrix::Identity(n, n))));
    q.mean = lp.solve(shift);
    if (gaussian_kl(q, post) < tolerance) break;
  }
  res.objective.push_back(felbo_closed_form(q, inst));
  res.final_kl = gaussian_kl(q, post);
  res.q = std::move(q);
  return res;
}

// ---------------------------------------------------------------------------
// Finite random measurement sets: maximize the average of L_{M u D} over a
// fixed family of probe sets M, with q a Gaussian over every row of X.

/// The instance restricted to data rows followed by `probe` rows; data rows
/// become 0..n_D-1.
inline FelboOracleInstance restrict_instance(const FelboOracleInstance& inst, const std::vector<std::size_t>& probe) {
  std::vector<std::size_t> rows = inst.data_rows;
  rows.insert(rows.end(), probe.begin(), probe.end());
  FelboOracleInstance sub;
  sub.prior = inst.prior;
  sub.y = inst.y;
  sub.obs_variance = inst.obs_variance;
  sub.x.resize(static_cast<Eigen::Index>(rows.size()), inst.x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    sub.x.row(static_cast<Eigen::Index>(i)) = inst.x.row(static_cast<Eigen::Index>(rows[i]));
  sub.data_rows.resize(inst.data_rows.size());
  std::iota(sub.data_rows.begin(), sub.data_rows.end(), 0);
  return sub;
}

inline Gaussian marginal(const Gaussian& q, const std::vector<std::size_t>& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  Gaussian m{Vector(n), Matrix(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ri = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    m.mean(i) = q.mean(ri);
    for (Eigen::Index j = 0; j < n; ++j) m.cov(i, j) = q.cov(ri, static_cast<Eigen::Index>(rows[static_cast<std::size_t>(j)]));
  }
  return m;
}

struct ProbeAscentResult {
  Gaussian q;
  std::vector<double> objective;  // mean over probe sets of L_{M u D}
  std::vector<double> kl;         // final KL(q || posterior) per probe set, at M u D
  double max_kl() const { return kl.empty() ? 0.0 : *std::max_element(kl.begin(), kl.end()); }
};

/// Natural-gradient ascent on (1/|P|) sum_M L_{M u D}. Each term is concave
/// in (mean, cov) and maximal at the posterior marginal, so the only
/// stationary point is q = posterior on the union. Steps that would lower
/// the objective or lose positive definiteness are halved.
inline ProbeAscentResult felbo_probe_ascent(const FelboOracleInstance& inst,
                                            const std::vector<std::vector<std::size_t>>& probes, Gaussian q,
                                            double rate = 0.5, std::size_t iterations = 500, double tolerance = 1e-12) {
  inst.validate();
  if (probes.empty()) throw PreconditionError("felbo_probe_ascent: no probe sets");
  const Eigen::Index n = inst.x.rows();
  if (q.dim() != n) throw DimensionError("felbo_probe_ascent: q has wrong size");
  struct Term {
    std::vector<std::size_t> rows;  // into X
    FelboOracleInstance sub;
    Gaussian post;
    Matrix post_prec;
  };
  std::vector<Term> terms;
  for (const auto& m : probes) {
    if (m.size() < 2) throw PreconditionError("felbo_probe_ascent: probe sets need at least two points");
    for (auto r : m) {
      if (r >= static_cast<std::size_t>(n)) throw PreconditionError("felbo_probe_ascent: probe row outside X");
      if (std::find(inst.data_rows.begin(), inst.data_rows.end(), r) != inst.data_rows.end())
        throw PreconditionError("felbo_probe_ascent: probe rows must exclude training rows");
    }
    Term t;
    t.rows = inst.data_rows;
    t.rows.insert(t.rows.end(), m.begin(), m.end());
    t.sub = restrict_instance(inst, m);
    t.post = function_posterior(t.sub);
    const auto k = static_cast<Eigen::Index>(t.rows.size());
    t.post_prec = detail::exact_llt(t.post.cov, "felbo_probe_ascent").solve(Matrix(Matrix::Identity(k, k)));
    terms.push_back(std::move(t));
  }
  const double w = 1.0 / static_cast<double>(terms.size());
  auto objective = [&](const Gaussian& g) {
    double s = 0.0;
    for (const auto& t : terms) s += felbo_closed_form(marginal(g, t.rows), t.sub);
    return w * s;
  };
  auto max_kl = [&](const Gaussian& g) {
    double m = 0.0;
    for (const auto& t : terms) m = std::max(m, gaussian_kl(marginal(g, t.rows), t.post));
    return m;
  };

  ProbeAscentResult res;
  double current = objective(q);
  double step = rate;
  for (std::size_t it = 0; it < iterations && max_kl(q) >= tolerance; ++it) {
    res.objective.push_back(current);
    // dL/dmu and dL/dSigma of each term, scattered into X's coordinates.
    Vector gm = Vector::Zero(n);
    Matrix gs = Matrix::Zero(n, n);
    for (const auto& t : terms) {
      const Gaussian qm = marginal(q, t.rows);
      const auto k = static_cast<Eigen::Index>(t.rows.size());
      const Vector dm = -(t.post_prec * (qm.mean - t.post.mean));
      const Matrix ds =
          0.5 * (detail::exact_llt(qm.cov, "felbo_probe_ascent").solve(Matrix(Matrix::Identity(k, k))) - t.post_prec);
      for (Eigen::Index i = 0; i < k; ++i) {
        const auto ri = static_cast<Eigen::Index>(t.rows[static_cast<std::size_t>(i)]);
        gm(ri) += w * dm(i);
        for (Eigen::Index j = 0; j < k; ++j) gs(ri, static_cast<Eigen::Index>(t.rows[static_cast<std::size_t>(j)])) += w * ds(i, j);
      }
    }
    const Vector dmu = q.cov * gm;
    const Matrix dsig = detail::symmetrize(2.0 * q.cov * gs * q.cov);
    bool accepted = false;
    for (int tries = 0; tries < 60 && !accepted; ++tries, step *= 0.5) {
      Gaussian cand{q.mean + step * dmu, detail::symmetrize(q.cov + step * dsig)};
      if (Eigen::LLT<Matrix>(cand.cov).info() != Eigen::Success) continue;
      const double val = objective(cand);
      if (std::isfinite(val) && val >= current) {
        q = std::move(cand);
        current = val;
        accepted = true;
      }
    }
    if (!accepted) break;
    step = std::min(rate, 4.0 * step);
  }
  res.objective.push_back(current);
  for (const auto& t : terms) res.kl.push_back(gaussian_kl(marginal(q, t.rows), t.post));
  res.q = std::move(q);
  return res;
}

// ---------------------------------------------------------------------------
// Linear processes: f(x) = W x with Gaussian W.

struct LinearKl {
  double weight_kl = 0.0;
  double function_kl = 0.0;
};

/// KL(q_W || p_W) against KL of the push-forwards at a d-point full-rank
/// subset of the rows of x.
inline LinearKl linear_kl_oracle(const Gaussian& q_w, const Gaussian& p_w, const Matrix& x) {
  const Eigen::Index d = q_w.dim();
  if (p_w.dim() != d || x.cols() != d) throw DimensionError("linear_kl_oracle: dimension mismatch");
  if (x.rows() < d) throw PreconditionError("linear_kl_oracle: need at least d inputs");
  Eigen::ColPivHouseholderQR<Matrix> qr(x.transpose());
  qr.setThreshold(1e-10);
  if (qr.rank() < d) throw PreconditionError("linear_kl_oracle: inputs do not span the weight space");
  Matrix xs(d, d);
  for (Eigen::Index i = 0; i < d; ++i) xs.row(i) = x.row(qr.colsPermutation().indices()(i));
  auto push = [&](const Gaussian& g) {
    return Gaussian{xs * g.mean, detail::symmetrize(xs * g.cov * xs.transpose())};
  };
  return {gaussian_kl(q_w, p_w), gaussian_kl(push(q_w), push(p_w))};
}

// ---------------------------------------------------------------------------
// Deep addition networks: f(x) = x + sum_l w_l with w_l ~ N(0, eta^2 / L).

struct DeepAdditionSpec {
  double eta = 1.0;  // prior scale of the aggregate weight
  double nu = 1.0;   // observation noise scale
  std::size_t depth = 1;
  Vector x, y;

  void validate() const {
    if (!(eta > 0.0) || !(nu > 0.0)) throw DomainError("deep addition: scales must be positive");
    if (depth < 1) throw PreconditionError("deep addition: depth must be at least 1");
    if (x.size() != y.size()) throw DimensionError("deep addition: x/y size mismatch");
  }
  double n() const { return static_cast<double>(y.size()); }
  double residual_sum() const { return (y - x).sum(); }
};

struct ScalarGaussian {
  double mean = 0.0;
  double variance = 0.0;
};

struct DeepAdditionClosedForm {
  ScalarGaussian functional;    // exact posterior of w = sum_l w_l
  ScalarGaussian weight_space;  // aggregate of the optimal factorized q
};

inline DeepAdditionClosedForm deep_addition_oracle(const DeepAdditionSpec& s) {
  s.validate();
  const double e2 = s.eta * s.eta, v2 = s.nu * s.nu, n = s.n(), depth = static_cast<double>(s.depth);
  const double mean = e2 * s.residual_sum() / (n * e2 + v2);
  return {{mean, v2 * e2 / (n * e2 + v2)}, {mean, v2 * e2 / (n * e2 / depth + v2)}};
}

enum class AdditionMethod { kFunctional, kFactorizedWeight };

struct DeepAdditionFit {
  ScalarGaussian aggregate;
  std::vector<ScalarGaussian> layers;
  std::vector<double> elbo;  // weight method only
};

/// Exact weight-space ELBO of a factorized q = prod_l N(m_l, s_l^2).
inline double deep_addition_elbo(const DeepAdditionSpec& s, const std::vector<double>& m, const std::vector<double>& sd) {
  const double v2 = s.nu * s.nu, pv = s.eta * s.eta / static_cast<double>(s.depth);
  double total_mean = 0.0, total_var = 0.0, kl = 0.0;
  for (std::size_t l = 0; l < m.size(); ++l) {
    total_mean += m[l];
    total_var += sd[l] * sd[l];
    kl += 0.5 * ((sd[l] * sd[l] + m[l] * m[l]) / pv - 1.0 - std::log(sd[l] * sd[l] / pv));
  }
  const Vector r = (s.y - s.x).array() - total_mean;
  return -0.5 * s.n() * (detail::kLog2Pi + std::log(v2)) - 0.5 * (r.squaredNorm() + s.n() * total_var) / v2 - kl;
}

/// Functional: the conjugate posterior. Factorized weight VI: Adam ascent on
/// the exact ELBO over (m_l, log s_l), learning rate decayed linearly to 1% of
/// its initial value, then aggregated.
inline DeepAdditionFit deep_addition_train(const DeepAdditionSpec& s, AdditionMethod method,
                                           std::size_t iterations = 20000, double learning_rate = 0.02) {
  s.validate();
  DeepAdditionFit fit;
  if (method == AdditionMethod::kFunctional) {
    fit.aggregate = deep_addition_oracle(s).functional;
    fit.layers = {fit.aggregate};
    return fit;
  }
  const std::size_t depth = s.depth;
  const double v2 = s.nu * s.nu, prec = static_cast<double>(depth) / (s.eta * s.eta);
  std::vector<double> m(depth, 0.0), log_sd(depth, -0.5 * std::log(prec));
  std::vector<double> gm(depth), gs(depth), sd(depth);
  vi::AdamState adam;
  const double rsum = s.residual_sum();
  for (std::size_t it = 0; it < iterations; ++it) {
    double total = 0.0;
    for (std::size_t l = 0; l < depth; ++l) {
      total += m[l];
      sd[l] = std::exp(log_sd[l]);
    }
    if (it % 100 == 0) fit.elbo.push_back(deep_addition_elbo(s, m, sd));
    const double dm_common = (rsum - s.n() * total) / v2;
    for (std::size_t l = 0; l < depth; ++l) {
      // Negated: adam_update descends.
      gm[l] = -(dm_common - m[l] * prec);
      gs[l] = -(1.0 - sd[l] * sd[l] * (s.n() / v2 + prec));
    }
    const double frac = static_cast<double>(it) / static_cast<double>(std::max<std::size_t>(iterations, 1));
    const double lr = learning_rate * (1.0 - 0.99 * frac);
    std::array<std::span<double>, 2> params{std::span<double>(m), std::span<double>(log_sd)};
    std::array<std::span<const double>, 2> grads{std::span<const double>(gm), std::span<const double>(gs)};
    vi::adam_update(adam, params, grads, lr);
    for (std::size_t l = 0; l < depth; ++l)
      if (!std::isfinite(m[l]) || !std::isfinite(log_sd[l]))
        throw NumericalError("deep_addition_train: diverged", 0.0, it);
  }
  fit.aggregate = {0.0, 0.0};
  for (std::size_t l = 0; l < depth; ++l) {
    const double var = std::exp(2.0 * log_sd[l]);
    fit.layers.push_back({m[l], var});
    fit.aggregate.mean += m[l];
    fit.aggregate.variance += var;
  }
  for (std::size_t l = 0; l < depth; ++l) sd[l] = std::exp(log_sd[l]);
  fit.elbo.push_back(deep_addition_elbo(s, m, sd));
  return fit;
}

/// n points with x ~ U[-1, 1] and y = x + w + N(0, nu^2), w ~ N(0, eta^2).
inline DeepAdditionSpec make_deep_addition(double eta, double nu, std::size_t n, std::size_t depth, Rng& rng) {
  DeepAdditionSpec s{eta, nu, depth, Vector(static_cast<Eigen::Index>(n)), Vector(static_cast<Eigen::Index>(n))};
  const double w = eta * rng.normal();
  for (Eigen::Index i = 0; i < s.x.size(); ++i) {
    s.x(i) = rng.uniform(-1.0, 1.0);
    s.y(i) = s.x(i) + w + nu * rng.normal();
  }
  return s;
}

}  // namespace fvi::lab
