#pragma once
// Dense vector/matrix primitives shared by every other header: softmax,
// cosine similarity, ridge-regularized square solves and Euclidean projection
// onto the probability simplex.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedade/errors.hpp"

namespace fedade {

using Vec = std::vector<double>;

/// Row-major dense matrix.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_)
      throw ArgumentError("Mat: " + std::to_string(values_.size()) + " values for " +
                          std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline constexpr double kSimplexTolerance = 1e-9;
inline constexpr double kZeroNorm = 1e-12;

/// A point of the probability simplex: nonnegative entries summing to one.
class ProbVector {
 public:
  ProbVector() = default;

  /// Validates `probs`; throws ArgumentError when it is not on the simplex.
  explicit ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw ArgumentError("ProbVector: empty");
    double sum = 0.0;
    for (double p : probs_) {
      if (!std::isfinite(p) || p < 0.0)
        throw ArgumentError("ProbVector: entry " + std::to_string(p) + " is not a probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kSimplexTolerance)
      throw ArgumentError("ProbVector: entries sum to " + std::to_string(sum));
  }

  static ProbVector uniform(std::size_t n) {
    if (n == 0) throw ArgumentError("ProbVector::uniform: zero classes");
    return ProbVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  static ProbVector one_hot(std::size_t n, std::size_t k) {
    std::vector<double> v(n, 0.0);
    v.at(k) = 1.0;
    return ProbVector(std::move(v));
  }

  /// Scales a nonnegative vector with positive sum onto the simplex.
  static ProbVector normalized(std::vector<double> v) {
    double sum = 0.0;
    for (double x : v) {
      if (!std::isfinite(x) || x < 0.0) throw ArgumentError("ProbVector::normalized: negative or non-finite entry");
      sum += x;
    }
    if (!(sum > 0.0)) throw DegenerateInputError("ProbVector::normalized: zero mass");
    for (double& x : v) x /= sum;
    return ProbVector(std::move(v));
  }

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& values() const noexcept { return probs_; }
  auto begin() const noexcept { return probs_.begin(); }
  auto end() const noexcept { return probs_.end(); }

  bool operator==(const ProbVector&) const = default;

 private:
  std::vector<double> probs_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y = M x
inline Vec matvec(const Mat& m, std::span<const double> x) {
  if (m.cols() != x.size()) throw ArgumentError("matvec: dimension mismatch");
  Vec y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

/// Numerically stable softmax (max-subtracted).
inline ProbVector softmax(std::span<const double> logits) {
  if (logits.empty()) throw ArgumentError("softmax: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return ProbVector(std::move(p));
}

/// Cosine similarity clamped to [-1, 1]. Throws DegenerateInputError when
/// either norm is below 1e-12.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("cosine: length mismatch");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na < kZeroNorm || nb < kZeroNorm) throw DegenerateInputError("cosine: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double cosine(const ProbVector& a, const ProbVector& b) { return cosine(a.values(), b.values()); }

inline double l1_distance(const ProbVector& p, const ProbVector& q) {
  if (p.size() != q.size()) throw ArgumentError("l1_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return s;
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Returns x minimizing |Mx - v|^2 + ridge |x|^2 by Gaussian elimination with
/// partial pivoting on (M^T M + ridge I) x = M^T v.
inline Vec solve_regularized(const Mat& m, std::span<const double> v, double ridge) {
  const std::size_t n = m.rows();
  if (n == 0 || m.cols() != n) throw ArgumentError("solve_regularized: matrix must be square");
  if (v.size() != n) throw ArgumentError("solve_regularized: rhs length mismatch");
  if (!(ridge >= 0.0)) throw ArgumentError("solve_regularized: ridge must be >= 0");

  // Augmented normal system [A | b].
  Mat a(n, n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += m(k, i) * m(k, j);
      a(i, j) = s + (i == j ? ridge : 0.0);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += m(k, i) * v[k];
    a(i, n) = s;
  }

  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a(i, i)));
  const double singular_tol = 1e-14 * std::max(scale, 1.0);
  double smallest_pivot = INFINITY;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
    smallest_pivot = std::min(smallest_pivot, std::abs(a(piv, col)));
    if (std::abs(a(piv, col)) <= singular_tol) {
      // Pivots of the normal matrix scale like squared singular values.
      throw IllConditionedError("solve_regularized: singular system (ridge = " + std::to_string(ridge) + ")",
                                std::sqrt(smallest_pivot));
    }
    if (piv != col)
      for (std::size_t c = col; c <= n; ++c) std::swap(a(piv, c), a(col, c));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      if (f == 0.0) continue;
      for (std::size_t c = col; c <= n; ++c) a(r, c) -= f * a(col, c);
    }
  }

  Vec x(n, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    double s = a(i, n);
    for (std::size_t j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
    x[i] = s / a(i, i);
  }
  return x;
}

/// Euclidean projection onto the probability simplex (sorted-threshold
/// method). Ties in the sort keep original index order.
inline ProbVector simplex_project(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("simplex_project: empty input");
  for (double x : v)
    if (!std::isfinite(x)) throw ArgumentError("simplex_project: non-finite input");

  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] > v[j]; });

  double cumsum = 0.0;
  double tau = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cumsum += v[order[k]];
    const double t = (cumsum - 1.0) / static_cast<double>(k + 1);
    if (v[order[k]] - t > 0.0) tau = t;
  }

  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::max(v[i] - tau, 0.0);
    sum += out[i];
  }
  // Absorb rounding so the result passes the 1e-9 simplex check.
  for (double& x : out) x /= sum;
  return ProbVector(std::move(out));
}

inline ProbVector simplex_project(const ProbVector& p) { return simplex_project(p.values()); }

}  // namespace fedade
