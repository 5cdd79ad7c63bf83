#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/vi/felbo.hpp"

namespace fvi::vi {

struct TrainConfig {
  std::optional<double> lambda;  // default 1/|Ds|
  std::size_t draws = 20;
  std::size_t ssge_draws = 100;  // 0 reuses the training draws
  std::optional<double> gamma;   // default from the prior
  std::size_t measure_points = 5;
  std::optional<Box> measure_box;  // default: expanded training rectangle
  std::size_t batch_size = 0;      // 0: full batch
  std::size_t iterations = 1000;
  double learning_rate = 1e-3;
  std::size_t anneal_horizon = 0;
  ObsModel obs = ObsModel::fixed(1.0);
  ssge::SsgeConfig ssge;
  // BBB only.
  double weight_prior_scale = 1.0;
  std::size_t bbb_draws = 10;

  void validate() const {
    if (lambda && !(*lambda > 0.0)) throw PreconditionError("TrainConfig: lambda must be positive");
    if (draws < 2) throw PreconditionError("TrainConfig: need at least two function draws");
    if (gamma && *gamma < 0.0) throw PreconditionError("TrainConfig: gamma must be nonnegative");
    if (measure_points < 1) throw PreconditionError("TrainConfig: need at least one measurement point");
    if (!(learning_rate > 0.0)) throw PreconditionError("TrainConfig: learning rate must be positive");
    if (bbb_draws < 1) throw PreconditionError("TrainConfig: need at least one BBB draw");
  }
};

struct TrainResult {
  ObsModel obs;
  std::vector<StepDiagnostics> trace;
};

/// Epoch-wise shuffled mini-batches; the full set when batch_size is 0 or >= n.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size) : n_(n), size_(batch_size == 0 ? n : std::min(batch_size, n)) {
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), 0);
    cursor_ = n;
  }

  std::vector<std::size_t> next(Rng& rng) {
    if (size_ == n_) return order_;
    if (cursor_ + size_ > n_) {
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + size_));
    cursor_ += size_;
    return idx;
  }

 private:
  std::size_t n_, size_, cursor_ = 0;
  std::vector<std::size_t> order_;
};

namespace detail {

inline Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Vector take(const Vector& y, const std::vector<std::size_t>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = y(static_cast<Eigen::Index>(idx[i]));
  return out;
}

template <typename Step>
StepDiagnostics guarded(std::size_t it, Step&& step) {
  try {
    StepDiagnostics d = step();
    if (!std::isfinite(d.loglik) || !std::isfinite(d.kl_term_norm))
      throw NumericalError("training diverged", 0.0, it);
    return d;
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + " at iteration " + std::to_string(it), e.last_jitter(), it);
  }
}

}  // namespace detail

using StepCallback = std::function<void(std::size_t, const StepDiagnostics&)>;

/// fBNN training loop: each step draws a mini-batch, fresh measurement points,
/// and takes one fELBO step.
inline TrainResult train_fbnn(StochasticMlp& mlp, const Matrix& x, const Vector& y, const PriorSource& prior,
                              const TrainConfig& cfg, Rng& rng, const StepCallback& callback = {}) {
  cfg.validate();
  if (x.rows() != y.size()) throw DimensionError("train_fbnn: target count mismatch");
  if (x.rows() == 0) throw PreconditionError("train_fbnn: empty dataset");
  const Box box = cfg.measure_box ? *cfg.measure_box : measurement_box(x);
  BatchSampler batches(static_cast<std::size_t>(x.rows()), cfg.batch_size);
  TrainResult res{cfg.obs, {}};
  res.trace.reserve(cfg.iterations);
  AdamState adam;
  FelboConfig fc;
  fc.draws = cfg.draws;
  fc.ssge_draws = cfg.ssge_draws;
  fc.gamma = cfg.gamma ? *cfg.gamma : default_gamma(prior);
  fc.ssge = cfg.ssge;
  fc.learning_rate = cfg.learning_rate;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto idx = batches.next(rng);
    MeasurementBatch b{sample_uniform_box(box, cfg.measure_points, rng), detail::take_rows(x, idx),
                       detail::take(y, idx)};
    fc.lambda = cfg.lambda ? *cfg.lambda : 1.0 / static_cast<double>(idx.size());
    fc.anneal = anneal(it, cfg.anneal_horizon);
    const auto d = detail::guarded(it, [&] { return felbo_step(mlp, b, prior, fc, res.obs, rng, adam); });
    res.trace.push_back(d);
    if (callback) callback(it, d);
  }
  return res;
}

inline TrainResult train_bbb(StochasticMlp& mlp, const Matrix& x, const Vector& y, const TrainConfig& cfg, Rng& rng,
                             const StepCallback& callback = {}) {
  cfg.validate();
  if (x.rows() != y.size()) throw DimensionError("train_bbb: target count mismatch");
  if (x.rows() == 0) throw PreconditionError("train_bbb: empty dataset");
  BatchSampler batches(static_cast<std::size_t>(x.rows()), cfg.batch_size);
  TrainResult res{cfg.obs, {}};
  res.trace.reserve(cfg.iterations);
  AdamState adam;
  BbbConfig bc;
  bc.prior_scale = cfg.weight_prior_scale;
  bc.dataset_size = static_cast<std::size_t>(x.rows());
  bc.draws = cfg.bbb_draws;
  bc.learning_rate = cfg.learning_rate;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto idx = batches.next(rng);
    bc.anneal = anneal(it, cfg.anneal_horizon);
    const Matrix xb = detail::take_rows(x, idx);
    const Vector yb = detail::take(y, idx);
    const auto d = detail::guarded(it, [&] { return bbb_step(mlp, xb, yb, bc, res.obs, rng, adam); });
    res.trace.push_back(d);
    if (callback) callback(it, d);
  }
  return res;
}

}  // namespace fvi::vi
