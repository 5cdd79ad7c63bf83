#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"

namespace fvi::priors {

// Hyperparameters are stored as logs so optimizers work unconstrained.

/// sigma^2 exp(-r^2 / (2 l^2))
struct Rbf {
  double log_variance = 0.0;
  double log_lengthscale = 0.0;
};

/// sigma^2 exp(-2 sum_d sin^2(pi (x_d - x'_d) / p) / l^2). In one dimension this
/// is the usual sin^2(pi r / p) form; summing per coordinate (a product of 1-D
/// periodic kernels) keeps the Gram PSD in higher dimensions, where the
/// Euclidean-distance version is not.
struct Periodic {
  double log_variance = 0.0;
  double log_lengthscale = 0.0;
  double log_period = 0.0;
};

/// sigma^2 exp(-r / l)
struct Matern12 {
  double log_variance = 0.0;
  double log_lengthscale = 0.0;
};

/// sigma^2 <x, x'>
struct Linear {
  double log_variance = 0.0;
};

class KernelSpec;

struct Sum {
  std::vector<KernelSpec> children;
};

class KernelSpec {
 public:
  using Variant = std::variant<Rbf, Periodic, Matern12, Linear, Sum>;

  KernelSpec(Rbf k) : v_(k) {}
  KernelSpec(Periodic k) : v_(k) {}
  KernelSpec(Matern12 k) : v_(k) {}
  KernelSpec(Linear k) : v_(k) {}
  KernelSpec(Sum k) : v_(std::move(k)) {
    if (std::get<Sum>(v_).children.size() < 2)
      throw PreconditionError("Sum kernel needs at least two children");
  }

  static KernelSpec rbf(double variance, double lengthscale) {
    return Rbf{std::log(variance), std::log(lengthscale)};
  }
  static KernelSpec periodic(double variance, double lengthscale, double period) {
    return Periodic{std::log(variance), std::log(lengthscale), std::log(period)};
  }
  static KernelSpec matern12(double variance, double lengthscale) {
    return Matern12{std::log(variance), std::log(lengthscale)};
  }
  static KernelSpec linear(double variance) { return Linear{std::log(variance)}; }
  static KernelSpec sum(std::vector<KernelSpec> children) { return Sum{std::move(children)}; }

  const Variant& variant() const noexcept { return v_; }

  /// Log-hyperparameters, depth first.
  std::vector<double> log_params() const {
    std::vector<double> out;
    append_params(out);
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    append_names(out, "");
    return out;
  }

  std::size_t num_params() const { return log_params().size(); }

  KernelSpec with_log_params(std::span<const double> p) const {
    std::size_t pos = 0;
    KernelSpec out = rebuild(p, pos);
    if (pos != p.size()) throw DimensionError("with_log_params: wrong parameter count");
    return out;
  }

  /// Sum of the child variances (the prior marginal variance for stationary parts).
  double total_variance() const {
    return std::visit(
        [](const auto& k) -> double {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Sum>) {
            double s = 0.0;
            for (const auto& c : k.children) s += c.total_variance();
            return s;
          } else {
            return std::exp(k.log_variance);
          }
        },
        v_);
  }

 private:
  void append_params(std::vector<double>& out) const {
    std::visit(
        [&](const auto& k) {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Rbf> || std::is_same_v<T, Matern12>) {
            out.insert(out.end(), {k.log_variance, k.log_lengthscale});
          } else if constexpr (std::is_same_v<T, Periodic>) {
            out.insert(out.end(), {k.log_variance, k.log_lengthscale, k.log_period});
          } else if constexpr (std::is_same_v<T, Linear>) {
            out.push_back(k.log_variance);
          } else {
            for (const auto& c : k.children) c.append_params(out);
          }
        },
        v_);
  }

  void append_names(std::vector<std::string>& out, const std::string& prefix) const {
    std::visit(
        [&](const auto& k) {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Rbf>) {
            out.insert(out.end(), {prefix + "rbf.log_variance", prefix + "rbf.log_lengthscale"});
          } else if constexpr (std::is_same_v<T, Matern12>) {
            out.insert(out.end(),
                       {prefix + "matern12.log_variance", prefix + "matern12.log_lengthscale"});
          } else if constexpr (std::is_same_v<T, Periodic>) {
            out.insert(out.end(), {prefix + "periodic.log_variance",
                                   prefix + "periodic.log_lengthscale", prefix + "periodic.log_period"});
          } else if constexpr (std::is_same_v<T, Linear>) {
            out.push_back(prefix + "linear.log_variance");
          } else {
            for (std::size_t i = 0; i < k.children.size(); ++i)
              k.children[i].append_names(out, prefix + "sum[" + std::to_string(i) + "].");
          }
        },
        v_);
  }

  KernelSpec rebuild(std::span<const double> p, std::size_t& pos) const {
    auto take = [&] {
      if (pos >= p.size()) throw DimensionError("with_log_params: too few parameters");
      return p[pos++];
    };
    return std::visit(
        [&](const auto& k) -> KernelSpec {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Rbf>) {
            const double a = take();
            return Rbf{a, take()};
          } else if constexpr (std::is_same_v<T, Matern12>) {
            const double a = take();
            return Matern12{a, take()};
          } else if constexpr (std::is_same_v<T, Periodic>) {
            const double a = take();
            const double b = take();
            return Periodic{a, b, take()};
          } else if constexpr (std::is_same_v<T, Linear>) {
            return Linear{take()};
          } else {
            Sum s;
            for (const auto& c : k.children) s.children.push_back(c.rebuild(p, pos));
            return s;
          }
        },
        v_);
  }

  Variant v_;
};

namespace detail {

inline double squared_distance(const Matrix& x1, Eigen::Index i, const Matrix& x2, Eigen::Index j) {
  return (x1.row(i) - x2.row(j)).squaredNorm();
}

/// Periodic kernel pieces over coordinates, a_d = pi (x_d - x'_d) / p:
/// (sum_d sin^2 a_d, sum_d sin a_d cos a_d a_d).
inline std::pair<double, double> periodic_terms(const Matrix& x1, Eigen::Index i, const Matrix& x2, Eigen::Index j,
                                                double p) {
  double s2 = 0.0, sca = 0.0;
  for (Eigen::Index d = 0; d < x1.cols(); ++d) {
    const double a = std::numbers::pi * (x1(i, d) - x2(j, d)) / p;
    const double s = std::sin(a);
    s2 += s * s;
    sca += s * std::cos(a) * a;
  }
  return {s2, sca};
}

template <typename F>
Matrix gram(const Matrix& x1, const Matrix& x2, F entry) {
  Matrix k(x1.rows(), x2.rows());
  for (Eigen::Index j = 0; j < x2.rows(); ++j)
    for (Eigen::Index i = 0; i < x1.rows(); ++i) k(i, j) = entry(i, j);
  return k;
}

}  // namespace detail

/// Gram matrix with entry (i, j) = k(x1_i, x2_j); rows of x1/x2 are inputs.
inline Matrix kernel_eval(const KernelSpec& spec, const Matrix& x1, const Matrix& x2) {
  if (x1.cols() != x2.cols())
    throw DimensionError("kernel_eval: input dimensions " + std::to_string(x1.cols()) + " and " +
                         std::to_string(x2.cols()));
  return std::visit(
      [&](const auto& k) -> Matrix {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, Rbf>) {
          const double v = std::exp(k.log_variance);
          const double l2 = std::exp(2.0 * k.log_lengthscale);
          return detail::gram(x1, x2, [&](auto i, auto j) {
            return v * std::exp(-0.5 * detail::squared_distance(x1, i, x2, j) / l2);
          });
        } else if constexpr (std::is_same_v<T, Periodic>) {
          const double v = std::exp(k.log_variance);
          const double l2 = std::exp(2.0 * k.log_lengthscale);
          const double p = std::exp(k.log_period);
          return detail::gram(x1, x2, [&](auto i, auto j) {
            return v * std::exp(-2.0 * detail::periodic_terms(x1, i, x2, j, p).first / l2);
          });
        } else if constexpr (std::is_same_v<T, Matern12>) {
          const double v = std::exp(k.log_variance);
          const double l = std::exp(k.log_lengthscale);
          return detail::gram(x1, x2, [&](auto i, auto j) {
            return v * std::exp(-std::sqrt(detail::squared_distance(x1, i, x2, j)) / l);
          });
        } else if constexpr (std::is_same_v<T, Linear>) {
          return std::exp(k.log_variance) * (x1 * x2.transpose());
        } else {
          Matrix out = kernel_eval(k.children.front(), x1, x2);
          for (std::size_t c = 1; c < k.children.size(); ++c) out += kernel_eval(k.children[c], x1, x2);
          return out;
        }
      },
      spec.variant());
}

inline Matrix kernel_eval(const KernelSpec& spec, const Matrix& x) { return kernel_eval(spec, x, x); }

/// Derivatives of the Gram of x with respect to each log-hyperparameter, in
/// log_params() order.
inline std::vector<Matrix> kernel_gradients(const KernelSpec& spec, const Matrix& x) {
  std::vector<Matrix> out;
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        const Matrix K = kernel_eval(spec, x);
        if constexpr (std::is_same_v<T, Rbf>) {
          const double l2 = std::exp(2.0 * k.log_lengthscale);
          out.push_back(K);
          out.push_back(detail::gram(x, x, [&](auto i, auto j) {
            return K(i, j) * detail::squared_distance(x, i, x, j) / l2;
          }));
        } else if constexpr (std::is_same_v<T, Periodic>) {
          const double l2 = std::exp(2.0 * k.log_lengthscale);
          const double p = std::exp(k.log_period);
          out.push_back(K);
          out.push_back(detail::gram(x, x, [&](auto i, auto j) {
            return K(i, j) * 4.0 * detail::periodic_terms(x, i, x, j, p).first / l2;
          }));
          out.push_back(detail::gram(x, x, [&](auto i, auto j) {
            return K(i, j) * 4.0 * detail::periodic_terms(x, i, x, j, p).second / l2;
          }));
        } else if constexpr (std::is_same_v<T, Matern12>) {
          const double l = std::exp(k.log_lengthscale);
          out.push_back(K);
          out.push_back(detail::gram(x, x, [&](auto i, auto j) {
            return K(i, j) * std::sqrt(detail::squared_distance(x, i, x, j)) / l;
          }));
        } else if constexpr (std::is_same_v<T, Linear>) {
          out.push_back(K);
        } else {
          for (const auto& c : k.children) {
            auto g = kernel_gradients(c, x);
            out.insert(out.end(), std::make_move_iterator(g.begin()), std::make_move_iterator(g.end()));
          }
        }
      },
      spec.variant());
  return out;
}

// JSON schema: {"variant": "rbf"|"periodic"|"matern12"|"linear"|"sum", log-params..., "children": [...]}

inline nlohmann::json kernel_to_json(const KernelSpec& spec) {
  return std::visit(
      [](const auto& k) -> nlohmann::json {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, Rbf>) {
          return {{"variant", "rbf"}, {"log_variance", k.log_variance}, {"log_lengthscale", k.log_lengthscale}};
        } else if constexpr (std::is_same_v<T, Periodic>) {
          return {{"variant", "periodic"},
                  {"log_variance", k.log_variance},
                  {"log_lengthscale", k.log_lengthscale},
                  {"log_period", k.log_period}};
        } else if constexpr (std::is_same_v<T, Matern12>) {
          return {{"variant", "matern12"}, {"log_variance", k.log_variance}, {"log_lengthscale", k.log_lengthscale}};
        } else if constexpr (std::is_same_v<T, Linear>) {
          return {{"variant", "linear"}, {"log_variance", k.log_variance}};
        } else {
          nlohmann::json children = nlohmann::json::array();
          for (const auto& c : k.children) children.push_back(kernel_to_json(c));
          return {{"variant", "sum"}, {"children", children}};
        }
      },
      spec.variant());
}

inline KernelSpec kernel_from_json(const nlohmann::json& j) {
  try {
    const std::string variant = j.at("variant").get<std::string>();
    if (variant == "rbf") return Rbf{j.at("log_variance").get<double>(), j.at("log_lengthscale").get<double>()};
    if (variant == "periodic")
      return Periodic{j.at("log_variance").get<double>(), j.at("log_lengthscale").get<double>(),
                      j.at("log_period").get<double>()};
    if (variant == "matern12")
      return Matern12{j.at("log_variance").get<double>(), j.at("log_lengthscale").get<double>()};
    if (variant == "linear") return Linear{j.at("log_variance").get<double>()};
    if (variant == "sum") {
      Sum s;
      for (const auto& c : j.at("children")) s.children.push_back(kernel_from_json(c));
      return s;
    }
    throw SchemaError("kernel: unknown variant '" + variant + "'");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("kernel: ") + e.what());
  }
}

}  // namespace fvi::priors
