#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fvi/numcore/error.hpp"

namespace fvi {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> adjoint;  // materialized on first accumulation
  Tape* tape = nullptr;
  bool needs_grad = false;
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& grad() {
    if (adjoint.empty()) adjoint.assign(value.size(), 0.0);
    return adjoint;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major array of doubles. A tensor is either a constant (no tape)
/// or a node recorded on exactly one Tape. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values for shape " + shape_string(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return constant({}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return constant({rows, cols}, std::move(values));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::span<const double> values() const { return node_->value; }
  std::span<const double> adjoint() const { return node_->adjoint; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.at(1) + c]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  Tape* tape() const noexcept { return node_ ? node_->tape : nullptr; }
  bool requires_grad() const noexcept { return node_ && node_->needs_grad; }

  const detail::NodePtr& impl() const noexcept { return node_; }

 private:
  detail::NodePtr node_;
};

/// Records primitive operations for one reverse sweep. Nodes are kept in
/// recording order and the sweep visits them in exactly the reverse order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor parameter(std::string name, Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
      throw DimensionError("parameter '" + name + "': value count does not match shape");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->tape = this;
    n->needs_grad = true;
    nodes_.push_back(n);
    Tensor t(std::move(n));
    params_.emplace_back(std::move(name), t);
    return t;
  }

  void backward(const Tensor& output, std::span<const double> cotangent) {
    if (consumed_) throw StateError("backward: tape already consumed");
    if (!output.defined() || output.tape() != this)
      throw StateError("backward: output was not recorded on this tape");
    if (cotangent.size() != output.size())
      throw DimensionError("backward: cotangent size " + std::to_string(cotangent.size()) +
                           " does not match output shape " + shape_string(output.shape()));
    consumed_ = true;
    auto& g = output.impl()->grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += cotangent[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward && !n.adjoint.empty()) n.backward(n.adjoint);
    }
  }

  void backward(const Tensor& scalar_output) {
    if (scalar_output.defined() && scalar_output.size() != 1)
      throw DimensionError("backward: implicit cotangent requires a scalar output");
    const double one = 1.0;
    backward(scalar_output, std::span<const double>(&one, 1));
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const std::vector<std::pair<std::string, Tensor>>& parameters() const noexcept {
    return params_;
  }

  /// Accumulated adjoint of a registered parameter (zeros when unreached).
  std::vector<double> gradient(std::string_view name) const {
    for (const auto& [n, t] : params_) {
      if (n == name) {
        if (t.adjoint().empty()) return std::vector<double>(t.size(), 0.0);
        return {t.adjoint().begin(), t.adjoint().end()};
      }
    }
    throw PreconditionError("gradient: unknown parameter '" + std::string(name) + "'");
  }

  void push(detail::NodePtr node) { nodes_.push_back(std::move(node)); }

 private:
  std::vector<detail::NodePtr> nodes_;
  std::vector<std::pair<std::string, Tensor>> params_;
  bool consumed_ = false;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->requires_grad()) continue;
    if (tape && t->tape() != tape) throw StateError("operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

/// Creates the result node and, when any input is differentiable, records it
/// with `backward` (which receives the result's adjoint).
inline Tensor record(Shape shape, std::vector<double> values, Tape* tape,
                     std::function<void(const std::vector<double>&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  if (tape) {
    n->tape = tape;
    n->needs_grad = true;
    n->backward = std::move(backward);
    tape->push(n);
  }
  return Tensor(std::move(n));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Tape buffers carry only malloc alignment, and Eigen's vectorized kernels
// split work differently depending on it. Products and reductions run on
// owned (aligned) copies so results don't depend on where the heap put them.
inline RowMat owned(const double* p, Eigen::Index rows, Eigen::Index cols) { return ConstMap(p, rows, cols); }

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  std::vector<double> out(m * n);
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  detail::MutMap(out.data(), ei(m), ei(n)) =
      detail::RowMat(detail::owned(a.values().data(), ei(m), ei(k)) * detail::owned(b.values().data(), ei(k), ei(n)));
  Tape* tape = detail::common_tape({&a, &b});
  auto an = a.impl();
  auto bn = b.impl();
  return detail::record({m, n}, std::move(out), tape, [an, bn, m, k, n, ei](const std::vector<double>& g) {
    const detail::RowMat G = detail::owned(g.data(), ei(m), ei(n));
    if (an->needs_grad)
      detail::MutMap(an->grad().data(), ei(m), ei(k)) +=
          detail::RowMat(G * detail::owned(bn->value.data(), ei(k), ei(n)).transpose());
    if (bn->needs_grad)
      detail::MutMap(bn->grad().data(), ei(k), ei(n)) +=
          detail::RowMat(detail::owned(an->value.data(), ei(m), ei(k)).transpose() * G);
  });
}

namespace detail {

enum class Binary { kAdd, kSub, kMul };

inline Tensor binary(const Tensor& a, const Tensor& b, Binary op) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw DimensionError("elementwise: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t size = numel(shape);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(size);
  for (std::size_t i = 0; i < size; ++i) {
    const double x = av[a_scalar ? 0 : i];
    const double y = bv[b_scalar ? 0 : i];
    out[i] = op == Binary::kAdd ? x + y : op == Binary::kSub ? x - y : x * y;
  }
  Tape* tape = common_tape({&a, &b});
  auto an = a.impl();
  auto bn = b.impl();
  return record(shape, std::move(out), tape, [an, bn, a_scalar, b_scalar, op](const std::vector<double>& g) {
    if (an->needs_grad) {
      auto& ga = an->grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = op == Binary::kMul ? bn->value[b_scalar ? 0 : i] : 1.0;
        ga[a_scalar ? 0 : i] += g[i] * d;
      }
    }
    if (bn->needs_grad) {
      auto& gb = bn->grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = op == Binary::kMul ? an->value[a_scalar ? 0 : i]
                         : op == Binary::kSub ? -1.0
                                              : 1.0;
        gb[b_scalar ? 0 : i] += g[i] * d;
      }
    }
  });
}

/// Pointwise map with derivative expressed through input x and output y.
template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tape* tape = common_tape({&x});
  auto xn = x.impl();
  if (!tape) return record(x.shape(), std::move(out), nullptr, {});
  auto result = record(x.shape(), std::move(out), tape, {});
  std::weak_ptr<Node> yw = result.impl();
  result.impl()->backward = [xn, yw, dfdx](const std::vector<double>& g) {
    auto yn = yw.lock();
    auto& gx = xn->grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xn->value[i], yn->value[i]);
  };
  return result;
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::kAdd); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::kSub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::kMul); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, detail::softplus, [](double v, double) { return detail::sigmoid(v); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
  return detail::unary(x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Sum over `axes` (all axes when empty); reduced axes are dropped.
inline Tensor sum(const Tensor& x, std::vector<std::size_t> axes = {}) {
  const Shape& in = x.shape();
  if (axes.empty()) {
    axes.resize(in.size());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t a : axes) {
    if (a >= in.size())
      throw DimensionError("reduce: axis " + std::to_string(a) + " out of range for shape " +
                           shape_string(in));
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (!reduced[i]) out_shape.push_back(in[i]);

  // Output strides projected onto input axes (0 along reduced axes).
  std::vector<std::size_t> proj(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (reduced[i]) continue;
    proj[i] = stride;
    stride *= in[i];
  }
  const std::size_t n = x.size();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < in.size(); ++d) o += idx[d] * proj[d];
    map[flat] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(numel(out_shape), 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[map[i]] += xv[i];
  Tape* tape = detail::common_tape({&x});
  auto xn = x.impl();
  return detail::record(std::move(out_shape), std::move(out), tape,
                        [xn, map = std::move(map)](const std::vector<double>& g) {
                          auto& gx = xn->grad();
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[map[i]];
                        });
}

inline Tensor mean(const Tensor& x, std::vector<std::size_t> axes = {}) {
  const std::size_t total = x.size();
  Tensor s = sum(x, axes);
  const std::size_t count = s.size() == 0 ? 1 : total / s.size();
  return scale(s, 1.0 / static_cast<double>(count));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  Tape* tape = detail::common_tape({&x});
  auto xn = x.impl();
  return detail::record(std::move(shape), std::move(out), tape, [xn](const std::vector<double>& g) {
    auto& gx = xn->grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  const Shape inner = parts.front().shape();
  const std::size_t block = parts.front().size();
  Tape* tape = nullptr;
  std::vector<detail::NodePtr> nodes;
  std::vector<double> out;
  out.reserve(block * parts.size());
  for (const Tensor& p : parts) {
    if (p.shape() != inner) throw DimensionError("stack: mismatched shapes");
    if (p.requires_grad()) {
      if (tape && p.tape() != tape) throw StateError("operands recorded on different tapes");
      tape = p.tape();
    }
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.impl());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return detail::record(std::move(shape), std::move(out), tape,
                        [nodes = std::move(nodes), block](const std::vector<double>& g) {
                          for (std::size_t p = 0; p < nodes.size(); ++p) {
                            if (!nodes[p]->needs_grad) continue;
                            auto& gp = nodes[p]->grad();
                            for (std::size_t i = 0; i < block; ++i) gp[i] += g[p * block + i];
                          }
                        });
}

}  // namespace fvi
