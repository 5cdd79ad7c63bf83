#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"
#include "fvi/numcore/rng.hpp"
#include "fvi/numcore/tensor.hpp"

namespace fvi::vi {

enum class Activation { kRelu, kTanh };

inline const char* activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw PreconditionError("unknown activation '" + s + "'");
}

/// Initial posterior standard deviation of every weight.
inline constexpr double kInitSigma = 0.05;

/// One dense layer of a mean-field Gaussian network. Weights are row-major
/// (in x out); sigma = softplus(rho).
struct StochasticLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> w_mu, w_rho, b_mu, b_rho;
};

/// Factorized Gaussian posterior over the weights of an MLP.
struct StochasticMlp {
  std::vector<std::size_t> sizes;
  Activation activation = Activation::kRelu;
  std::vector<StochasticLayer> layers;

  std::size_t input_dim() const { return sizes.front(); }
  std::size_t output_dim() const { return sizes.back(); }

  /// Number of (mu, rho) pairs.
  std::size_t weight_count() const {
    std::size_t c = 0;
    for (const auto& l : layers) c += (l.in + 1) * l.out;
    return c;
  }

  /// Parameter groups in registry order: per layer w_mu, w_rho, b_mu, b_rho.
  std::vector<std::span<double>> parameter_groups() {
    std::vector<std::span<double>> g;
    for (auto& l : layers) {
      g.emplace_back(l.w_mu);
      g.emplace_back(l.w_rho);
      g.emplace_back(l.b_mu);
      g.emplace_back(l.b_rho);
    }
    return g;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> n;
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (const char* s : {"w_mu", "w_rho", "b_mu", "b_rho"})
        n.push_back("layer" + std::to_string(i) + "." + s);
    return n;
  }

  /// Sets every rho to the same value (sigma = softplus(rho)).
  void set_rho(double rho) {
    for (auto& l : layers) {
      std::fill(l.w_rho.begin(), l.w_rho.end(), rho);
      std::fill(l.b_rho.begin(), l.b_rho.end(), rho);
    }
  }
};

/// mu ~ N(0, 1/fan_in), sigma = 0.05 for every weight and bias.
inline StochasticMlp init_mlp(std::vector<std::size_t> sizes, Activation activation, Rng& rng) {
  if (sizes.size() < 3) throw PreconditionError("init_mlp: need at least one hidden layer");
  for (std::size_t s : sizes)
    if (s == 0) throw PreconditionError("init_mlp: zero-width layer");
  StochasticMlp mlp;
  mlp.sizes = std::move(sizes);
  mlp.activation = activation;
  const double rho0 = std::log(std::expm1(kInitSigma));
  for (std::size_t i = 0; i + 1 < mlp.sizes.size(); ++i) {
    StochasticLayer l;
    l.in = mlp.sizes[i];
    l.out = mlp.sizes[i + 1];
    const double sd = 1.0 / std::sqrt(static_cast<double>(l.in));
    l.w_mu.resize(l.in * l.out);
    for (auto& w : l.w_mu) w = sd * rng.normal();
    l.b_mu.resize(l.out);
    for (auto& b : l.b_mu) b = sd * rng.normal();
    l.w_rho.assign(l.w_mu.size(), rho0);
    l.b_rho.assign(l.out, rho0);
    mlp.layers.push_back(std::move(l));
  }
  return mlp;
}

/// Parses "2x100" (hidden layers x width) into full layer sizes.
inline std::vector<std::size_t> parse_arch(const std::string& arch, std::size_t in, std::size_t out) {
  const auto x = arch.find('x');
  if (x == std::string::npos) throw PreconditionError("architecture must look like 2x100, got '" + arch + "'");
  std::size_t depth = 0, width = 0;
  try {
    depth = std::stoul(arch.substr(0, x));
    width = std::stoul(arch.substr(x + 1));
  } catch (const std::exception&) {
    throw PreconditionError("architecture must look like 2x100, got '" + arch + "'");
  }
  if (depth == 0 || width == 0) throw PreconditionError("architecture needs positive depth and width");
  std::vector<std::size_t> sizes{in};
  for (std::size_t i = 0; i < depth; ++i) sizes.push_back(width);
  sizes.push_back(out);
  return sizes;
}

namespace detail {

using fvi::detail::ConstMap;
using fvi::detail::MutMap;

/// One stochastic layer under k weight draws:
///   out[s] = h[s] (w_mu + softplus(w_rho) * ew[s]) + (b_mu + softplus(b_rho) * eb[s]).
/// h is (n, din) shared by all draws or (k, n, din); the result is (k, n, dout).
/// Only the noise is kept for the backward pass; each draw's weights are
/// rebuilt on the fly instead of materializing k weight tensors.
inline Tensor stochastic_affine(const Tensor& h, const Tensor& w_mu, const Tensor& w_rho, const Tensor& b_mu,
                                const Tensor& b_rho, std::vector<double> ew, std::vector<double> eb, std::size_t k) {
  if (w_mu.rank() != 2 || b_mu.rank() != 1) throw DimensionError("stochastic_affine: bad parameter ranks");
  const bool shared = h.rank() == 2;
  if (!shared && h.rank() != 3) throw DimensionError("stochastic_affine: input must be rank 2 or 3");
  const std::size_t din = w_mu.dim(0), dout = w_mu.dim(1), p = din * dout;
  const std::size_t n = shared ? h.dim(0) : h.dim(1);
  if ((shared ? h.dim(1) : h.dim(2)) != din || (!shared && h.dim(0) != k) || b_mu.dim(0) != dout ||
      w_rho.size() != p || b_rho.size() != dout || ew.size() != k * p || eb.size() != k * dout)
    throw DimensionError("stochastic_affine: shape mismatch " + shape_string(h.shape()) + ", " +
                         shape_string(w_mu.shape()) + ", " + shape_string(b_mu.shape()));
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  // softplus and its derivative share t = exp(-|rho|); Eigen's packet exp/log1p
  // keep this off the profile for wide layers. Computed in Eigen-owned
  // (aligned) arrays: packet vs scalar tails must not depend on malloc.
  std::vector<double> sw(p), sb(dout), tw(p);
  {
    using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
    const Arr r = Eigen::Map<const Arr>(w_rho.values().data(), ei(p));
    const Arr t = (-r.abs()).exp();
    const Arr v = r.max(0.0) + t.log1p();
    std::copy(t.data(), t.data() + p, tw.begin());
    std::copy(v.data(), v.data() + p, sw.begin());
  }
  for (std::size_t j = 0; j < dout; ++j) sb[j] = fvi::detail::softplus(b_rho[j]);
  // Weights of draw s in an aligned scratch matrix.
  auto build = [ei, din, dout, p](fvi::detail::RowMat& w, std::span<const double> mu, const std::vector<double>& sig,
                                  const double* eps) {
    w.resize(ei(din), ei(dout));
    double* d = w.data();
    for (std::size_t i = 0; i < p; ++i) d[i] = mu[i] + sig[i] * eps[i];
  };
  std::vector<double> out(k * n * dout);
  fvi::detail::RowMat ws, hs;
  if (shared) hs = fvi::detail::owned(h.values().data(), ei(n), ei(din));
  for (std::size_t s = 0; s < k; ++s) {
    if (!shared) hs = fvi::detail::owned(h.values().data() + s * n * din, ei(n), ei(din));
    build(ws, w_mu.values(), sw, ew.data() + s * p);
    const fvi::detail::RowMat os = hs * ws;
    double* o = out.data() + s * n * dout;
    const double* e = eb.data() + s * dout;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dout; ++j) o[i * dout + j] = os(ei(i), ei(j)) + b_mu[j] + sb[j] * e[j];
  }
  Tape* tape = fvi::detail::common_tape({&h, &w_mu, &w_rho, &b_mu, &b_rho});
  return fvi::detail::record(
      {k, n, dout}, std::move(out), tape,
      [hn = h.impl(), wm = w_mu.impl(), wr = w_rho.impl(), bm = b_mu.impl(), br = b_rho.impl(), ew = std::move(ew),
       eb = std::move(eb), sw = std::move(sw), tw = std::move(tw), shared, k, n, din, dout, p, ei, build](const std::vector<double>& g) {
        std::vector<double> acc_w(wr->needs_grad ? p : 0, 0.0), acc_b(br->needs_grad ? dout : 0, 0.0);
        fvi::detail::RowMat ws, hs;
        if (shared) hs = fvi::detail::owned(hn->value.data(), ei(n), ei(din));
        for (std::size_t s = 0; s < k; ++s) {
          const auto gs = fvi::detail::owned(g.data() + s * n * dout, ei(n), ei(dout));
          if (hn->needs_grad) {
            build(ws, wm->value, sw, ew.data() + s * p);
            MutMap gh(hn->grad().data() + (shared ? 0 : s * n * din), ei(n), ei(din));
            gh += fvi::detail::RowMat(gs * ws.transpose());
          }
          if (wm->needs_grad || wr->needs_grad) {
            if (!shared) hs = fvi::detail::owned(hn->value.data() + s * n * din, ei(n), ei(din));
            const fvi::detail::RowMat gw = hs.transpose() * gs;
            const double* d = gw.data();
            if (wm->needs_grad) {
              auto& gm = wm->grad();
              for (std::size_t i = 0; i < p; ++i) gm[i] += d[i];
            }
            const double* e = ew.data() + s * p;
            for (std::size_t i = 0; i < acc_w.size(); ++i) acc_w[i] += d[i] * e[i];
          }
          if (bm->needs_grad || br->needs_grad) {
            const double* e = eb.data() + s * dout;
            double* gbm = bm->needs_grad ? bm->grad().data() : nullptr;
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < dout; ++j) {
                const double v = g[(s * n + i) * dout + j];
                if (gbm) gbm[j] += v;
                if (!acc_b.empty()) acc_b[j] += v * e[j];
              }
          }
        }
        if (!acc_w.empty()) {
          auto& gr = wr->grad();
          for (std::size_t i = 0; i < p; ++i) {
            const double t = tw[i];  // sigmoid(rho) from exp(-|rho|)
            gr[i] += acc_w[i] * (wr->value[i] >= 0.0 ? 1.0 / (1.0 + t) : t / (1.0 + t));
          }
        }
        if (!acc_b.empty()) {
          auto& gr = br->grad();
          for (std::size_t j = 0; j < dout; ++j) gr[j] += acc_b[j] * fvi::detail::sigmoid(br->value[j]);
        }
      });
}

inline std::vector<double> to_row_major(const Matrix& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  Eigen::Map<fvi::detail::RowMat>(v.data(), m.rows(), m.cols()) = m;
  return v;
}

}  // namespace detail

/// k function draws evaluated on a common input set. When recorded, `tape`
/// owns the graph and `params` are the registered parameters in registry order.
struct FunctionDraws {
  std::unique_ptr<Tape> tape;
  std::vector<Tensor> params;
  Tensor values;  // (k, n, out)

  /// Draws as a k x n matrix; requires a single output.
  Matrix as_matrix() const {
    if (values.dim(2) != 1) throw DimensionError("FunctionDraws: as_matrix needs one output");
    const auto k = static_cast<Eigen::Index>(values.dim(0));
    const auto n = static_cast<Eigen::Index>(values.dim(1));
    return Eigen::Map<const fvi::detail::RowMat>(values.values().data(), k, n);
  }

  /// Gradients of every parameter group after backward, registry order.
  std::vector<std::vector<double>> gradients() const {
    std::vector<std::vector<double>> g;
    for (const auto& p : params)
      g.push_back(p.adjoint().empty() ? std::vector<double>(p.size(), 0.0)
                                      : std::vector<double>(p.adjoint().begin(), p.adjoint().end()));
    return g;
  }
};

/// Draws k weight realizations (one noise vector per draw shared by all
/// inputs) and evaluates the network at every row of x. With `record`, the
/// graph lives on a fresh tape and gradients flow to (mu, rho).
inline FunctionDraws sample_functions(const StochasticMlp& mlp, const Matrix& x, std::size_t k, Rng& rng,
                                      bool record = true) {
  if (k < 1) throw PreconditionError("sample_functions: need at least one draw");
  if (static_cast<std::size_t>(x.cols()) != mlp.input_dim())
    throw DimensionError("sample_functions: input dimension " + std::to_string(x.cols()) + ", network expects " +
                         std::to_string(mlp.input_dim()));
  FunctionDraws out;
  if (record) out.tape = std::make_unique<Tape>();
  const auto names = mlp.parameter_names();
  auto param = [&](std::size_t idx, Shape shape, const std::vector<double>& v) {
    Tensor t = record ? out.tape->parameter(names[idx], std::move(shape), v) : Tensor::constant(std::move(shape), v);
    out.params.push_back(t);
    return t;
  };
  Tensor h = Tensor::matrix(static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols()),
                            detail::to_row_major(x));
  for (std::size_t li = 0; li < mlp.layers.size(); ++li) {
    const auto& l = mlp.layers[li];
    Tensor wm = param(4 * li, {l.in, l.out}, l.w_mu);
    Tensor wr = param(4 * li + 1, {l.in, l.out}, l.w_rho);
    Tensor bm = param(4 * li + 2, {l.out}, l.b_mu);
    Tensor br = param(4 * li + 3, {l.out}, l.b_rho);
    std::vector<double> ew(k * l.in * l.out), eb(k * l.out);
    rng.fill_normal(ew);
    rng.fill_normal(eb);
    h = detail::stochastic_affine(h, wm, wr, bm, br, std::move(ew), std::move(eb), k);
    if (li + 1 < mlp.layers.size()) h = mlp.activation == Activation::kRelu ? relu(h) : tanh(h);
  }
  out.values = h;
  return out;
}

/// Affine input/target standardization. Constant input coordinates keep std 1.
struct Normalization {
  Vector x_mean, x_std;
  double y_mean = 0.0, y_std = 1.0;

  Matrix normalize_x(const Matrix& x) const {
    return ((x.rowwise() - x_mean.transpose()).array().rowwise() / x_std.transpose().array()).matrix();
  }
  Vector normalize_y(const Vector& y) const { return ((y.array() - y_mean) / y_std).matrix(); }
  Matrix denormalize_x(const Matrix& x) const {
    return ((x.array().rowwise() * x_std.transpose().array()).rowwise() + x_mean.transpose().array()).matrix();
  }
  Vector denormalize_y(const Vector& y) const { return (y.array() * y_std + y_mean).matrix(); }
};

struct Prediction {
  Matrix mean;  // n x out
  Matrix std;   // n x out
};

/// Monte-Carlo predictive moments over S function draws. With normalization
/// stats, x is in raw units and outputs are mapped back to raw target units.
inline Prediction predict(const StochasticMlp& mlp, const Matrix& x, std::size_t draws, Rng& rng,
                          const std::optional<Normalization>& norm = std::nullopt) {
  if (draws < 2) throw PreconditionError("predict: need at least two draws");
  const Matrix xin = norm ? norm->normalize_x(x) : x;
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto out_dim = static_cast<Eigen::Index>(mlp.output_dim());
  Matrix sum = Matrix::Zero(n, out_dim), sq = Matrix::Zero(n, out_dim);
  // Chunked so memory stays bounded for large S.
  constexpr std::size_t kChunk = 256;
  for (std::size_t done = 0; done < draws;) {
    const std::size_t c = std::min(kChunk, draws - done);
    const FunctionDraws d = sample_functions(mlp, xin, c, rng, false);
    const auto v = d.values.values();
    for (std::size_t s = 0; s < c; ++s)
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index o = 0; o < out_dim; ++o) {
          const double f = v[(s * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)) *
                                 static_cast<std::size_t>(out_dim) +
                             static_cast<std::size_t>(o)];
          sum(i, o) += f;
          sq(i, o) += f * f;
        }
    done += c;
  }
  const double s = static_cast<double>(draws);
  Prediction p;
  p.mean = sum / s;
  p.std = ((sq / s - p.mean.cwiseProduct(p.mean)).cwiseMax(0.0) * (s / (s - 1.0))).cwiseSqrt();
  if (norm) {
    p.mean = (p.mean.array() * norm->y_std + norm->y_mean).matrix();
    p.std *= norm->y_std;
  }
  return p;
}

}  // namespace fvi::vi
