#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fvi/numcore/error.hpp"
#include "fvi/numcore/linalg.hpp"
#include "fvi/numcore/rng.hpp"
#include "fvi/priors/implicit.hpp"
#include "fvi/vi/mlp.hpp"

namespace fvi::lab {

using vi::Normalization;

/// Regression data: rows of x are inputs, y the targets.
struct Dataset {
  Matrix x;
  Vector y;
  std::string provenance;
  std::vector<std::string> feature_names;
  std::string target_name = "y";

  std::size_t size() const { return static_cast<std::size_t>(y.size()); }
  std::size_t dim() const { return static_cast<std::size_t>(x.cols()); }
};

/// Per-column mean/std. Constant input columns get std 1 (so they normalize
/// to 0) and are flagged; a constant target also gets std 1.
struct NormalizationStats {
  Normalization norm;
  std::vector<bool> constant_columns;
};

inline NormalizationStats compute_normalization(const Dataset& d) {
  if (d.size() == 0) throw PreconditionError("compute_normalization: empty dataset");
  NormalizationStats s;
  const double n = static_cast<double>(d.size());
  s.norm.x_mean = d.x.colwise().mean().transpose();
  s.norm.x_std.resize(d.x.cols());
  s.constant_columns.assign(static_cast<std::size_t>(d.x.cols()), false);
  for (Eigen::Index c = 0; c < d.x.cols(); ++c) {
    const double sd = std::sqrt((d.x.col(c).array() - s.norm.x_mean(c)).square().sum() / n);
    if (sd > 0.0) {
      s.norm.x_std(c) = sd;
    } else {
      s.norm.x_std(c) = 1.0;
      s.constant_columns[static_cast<std::size_t>(c)] = true;
    }
  }
  s.norm.y_mean = d.y.mean();
  const double ysd = std::sqrt((d.y.array() - s.norm.y_mean).square().sum() / n);
  s.norm.y_std = ysd > 0.0 ? ysd : 1.0;
  return s;
}

inline Dataset normalize(const Dataset& d, const Normalization& n) {
  Dataset out = d;
  out.x = n.normalize_x(d.x);
  out.y = n.normalize_y(d.y);
  return out;
}

inline Dataset denormalize(const Dataset& d, const Normalization& n) {
  Dataset out = d;
  out.x = n.denormalize_x(d.x);
  out.y = n.denormalize_y(d.y);
  return out;
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> f;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, delim)) f.push_back(cur);
  if (!line.empty() && line.back() == delim) f.emplace_back();
  return f;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& s, double& v) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
  return ec == std::errc() && ptr == t.data() + t.size();
}

}  // namespace detail

/// Reads a delimited file with a header row. `target` names the target column;
/// empty selects the last column. Blank lines are skipped.
inline Dataset load_csv(const std::filesystem::path& path, const std::string& target = "", char delim = ',') {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) {
      header = detail::split_fields(line, delim);
      break;
    }
  }
  if (header.empty()) throw SchemaError("load_csv: missing header row in " + path.string());
  for (auto& h : header) h = detail::trim(h);
  std::size_t tcol = header.size() - 1;
  if (!target.empty()) {
    const auto it = std::find(header.begin(), header.end(), target);
    if (it == header.end()) throw SchemaError("load_csv: no column named '" + target + "'");
    tcol = static_cast<std::size_t>(it - header.begin());
  }
  if (header.size() < 2) throw SchemaError("load_csv: need at least one feature and one target column");

  std::vector<std::vector<double>> rows;
  std::vector<double> ys;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_fields(line, delim);
    if (f.size() != header.size())
      throw ParseError("load_csv: expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(f.size()),
                       line_no);
    std::vector<double> row;
    row.reserve(header.size() - 1);
    for (std::size_t c = 0; c < f.size(); ++c) {
      double v = 0.0;
      if (!detail::parse_double(f[c], v)) {
        if (c == tcol)
          throw SchemaError("load_csv: non-numeric target '" + detail::trim(f[c]) + "' on line " +
                            std::to_string(line_no));
        throw ParseError("load_csv: non-numeric value '" + detail::trim(f[c]) + "' in column '" + header[c] + "'",
                         line_no);
      }
      if (c == tcol)
        ys.push_back(v);
      else
        row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw SchemaError("load_csv: no data rows in " + path.string());
  Dataset d;
  d.provenance = path.filename().string();
  d.target_name = header[tcol];
  for (std::size_t c = 0; c < header.size(); ++c)
    if (c != tcol) d.feature_names.push_back(header[c]);
  d.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(header.size() - 1));
  d.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    d.y(static_cast<Eigen::Index>(r)) = ys[r];
  }
  return d;
}

/// Shortest-round-trip-safe formatting (17 significant digits).
inline std::string fmt17(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

/// Features then target, header row included.
inline void write_csv(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path.string());
  for (std::size_t c = 0; c < d.dim(); ++c)
    out << (c < d.feature_names.size() ? d.feature_names[c] : "x" + std::to_string(c)) << ',';
  out << d.target_name << '\n';
  for (Eigen::Index r = 0; r < d.x.rows(); ++r) {
    for (Eigen::Index c = 0; c < d.x.cols(); ++c) out << fmt17(d.x(r, c)) << ',';
    out << fmt17(d.y(r)) << '\n';
  }
}

inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.provenance = d.provenance;
  out.feature_names = d.feature_names;
  out.target_name = d.target_name;
  out.x.resize(static_cast<Eigen::Index>(idx.size()), d.x.cols());
  out.y.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = d.x.row(static_cast<Eigen::Index>(idx[i]));
    out.y(static_cast<Eigen::Index>(i)) = d.y(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

/// Shuffled disjoint train/test partition; train gets round(fraction * n)
/// rows, clamped so both sides are non-empty when n >= 2.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw PreconditionError("split: train fraction must be in (0, 1)");
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, 0x53504C4954ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t nt = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n >= 2) nt = std::clamp<std::size_t>(nt, 1, n - 1);
  const std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nt));
  const std::vector<std::size_t> te(idx.begin() + static_cast<std::ptrdiff_t>(nt), idx.end());
  return {subset(d, tr), subset(d, te)};
}

/// Cubic toy: 20 points x ~ U[-2, 2], y = x^3 + N(0, 0.4^2).
struct CubicToySpec {
  std::size_t n = 20;
  double lo = -2.0, hi = 2.0;
  double noise_std = 0.4;
};

inline double cubic_truth(double x) { return x * x * x; }

inline Dataset make_cubic_toy(const CubicToySpec& spec, Rng& rng) {
  Dataset d;
  d.provenance = "cubic-toy";
  d.feature_names = {"x"};
  d.x.resize(static_cast<Eigen::Index>(spec.n), 1);
  d.y.resize(static_cast<Eigen::Index>(spec.n));
  for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
    d.x(i, 0) = rng.uniform(spec.lo, spec.hi);
    d.y(i) = cubic_truth(d.x(i, 0)) + spec.noise_std * rng.normal();
  }
  return d;
}

/// Periodic toy: 20 inputs uniform on [-2, -0.5] U [0.5, 2], y = 2 sin(4x) + N(0, 0.04).
struct PeriodicToySpec {
  std::size_t n = 20;
  double noise_variance = 0.04;
};

inline double periodic_truth(double x) { return 2.0 * std::sin(4.0 * x); }

inline Dataset make_periodic_toy(const PeriodicToySpec& spec, Rng& rng) {
  Dataset d;
  d.provenance = "periodic-toy";
  d.feature_names = {"x"};
  d.x.resize(static_cast<Eigen::Index>(spec.n), 1);
  d.y.resize(static_cast<Eigen::Index>(spec.n));
  const double sd = std::sqrt(spec.noise_variance);
  for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
    // Both pieces have width 1.5: pick one, then a point within it.
    const double u = rng.uniform(0.5, 2.0);
    d.x(i, 0) = rng.uniform() < 0.5 ? -u : u;
    d.y(i) = periodic_truth(d.x(i, 0)) + sd * rng.normal();
  }
  return d;
}

/// Implicit-prior toy: a function drawn from the prior, observed at 20 points
/// on [0, 0.2] and 20 on [0.8, 1] with noise std 0.02.
struct ImplicitToy {
  priors::PiecewiseFunction truth;
  Dataset data;
};

inline ImplicitToy make_implicit_toy(const priors::ImplicitPriorSpec& spec, Rng& rng, double noise_std = 0.02) {
  ImplicitToy t;
  t.truth = priors::sample_piecewise(spec, rng);
  t.data.provenance = "implicit-toy";
  t.data.feature_names = {"x"};
  t.data.x.resize(40, 1);
  t.data.y.resize(40);
  for (Eigen::Index i = 0; i < 40; ++i) {
    t.data.x(i, 0) = i < 20 ? rng.uniform(0.0, 0.2) : rng.uniform(0.8, 1.0);
    t.data.y(i) = t.truth(t.data.x(i, 0)) + noise_std * rng.normal();
  }
  return t;
}

}  // namespace fvi::lab
