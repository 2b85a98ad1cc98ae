#pragma once

// Dense row-major real matrices and the handful of kernels the analyses need:
// products, causal row-softmax, symmetric eigendecomposition (cyclic Jacobi)
// and regularized SPD solves. Sizes here are small (d_head ~ 128, T ~ 10^3),
// so everything is plain loops over std::vector<double>.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sinktag/error.hpp"

namespace sinktag {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix column(const Vector& v) { return Matrix(v.size(), 1, v); }
  static Matrix row_vector(const Vector& v) { return Matrix(1, v.size(), v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector row_copy(std::size_t r) const {
    auto s = row(r);
    return {s.begin(), s.end()};
  }
  Vector col_copy(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Reductions. Pairwise summation keeps the error O(log n) on long rows.

namespace detail {
constexpr std::size_t kPairwiseBlock = 16;

template <typename Term>
double pairwise_reduce(std::size_t lo, std::size_t hi, const Term& term) {
  if (hi - lo <= kPairwiseBlock) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += term(i);
    return s;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_reduce(lo, mid, term) + pairwise_reduce(mid, hi, term);
}
}  // namespace detail

inline double pairwise_sum(std::span<const double> x) {
  return detail::pairwise_reduce(0, x.size(), [&](std::size_t i) { return x[i]; });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  return detail::pairwise_reduce(0, a.size(), [&](std::size_t i) { return a[i] * b[i]; });
}

inline double norm(std::span<const double> a) {
  double scale = 0.0;
  for (double x : a) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  const double ss =
      detail::pairwise_reduce(0, a.size(), [&](std::size_t i) { return (a[i] / scale) * (a[i] / scale); });
  return scale * std::sqrt(ss);
}

inline double frobenius_norm(const Matrix& m) { return norm(m.data()); }

// Cosine similarity; throws on a zero-norm argument.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DataError("cosine: zero-norm vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Elementwise helpers.

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add: shape mismatch");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("sub: shape mismatch");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& x : out.data()) x *= s;
  return out;
}

// ---------------------------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  const Matrix bt = transpose(b);
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) = dot(a.row(i), bt.row(j));
  return out;
}

// a^T b.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) { return matmul(transpose(a), b); }

// a b^T; rows of both operands are contiguous so no transpose is needed.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimension mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), x);
  return out;
}

// Row-wise softmax over the first k+1 entries of row k; the strict upper
// triangle is set to exactly zero.
inline Matrix causal_softmax_rows(const Matrix& scores) {
  if (scores.rows() != scores.cols()) throw DimensionError("causal_softmax_rows: matrix must be square");
  const std::size_t n = scores.rows();
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    auto in = scores.row(k).first(k + 1);
    auto dst = out.row(k);
    const double mx = *std::max_element(in.begin(), in.end());
    for (std::size_t j = 0; j <= k; ++j) dst[j] = std::exp(in[j] - mx);
    const double z = pairwise_sum(dst.first(k + 1));
    for (std::size_t j = 0; j <= k; ++j) dst[j] /= z;
  }
  return out;
}

// Unmasked softmax of a single row.
inline Vector softmax(std::span<const double> scores) {
  if (scores.empty()) return {};
  const double mx = *std::max_element(scores.begin(), scores.end());
  Vector out(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j) out[j] = std::exp(scores[j] - mx);
  const double z = pairwise_sum(out);
  for (double& x : out) x /= z;
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition.

struct EigenResult {
  Vector eigenvalues;   // non-increasing
  Matrix eigenvectors;  // columns, orthonormal, largest-|component| positive
};

namespace detail {

inline double max_abs(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) s = std::max(s, std::abs(x));
  return s;
}

// Flip column c so that its largest-magnitude component is positive. Ties go to
// the lowest row index.
inline void fix_sign(Matrix& v, std::size_t c) {
  std::size_t best = 0;
  double best_abs = -1.0;
  for (std::size_t r = 0; r < v.rows(); ++r) {
    if (std::abs(v(r, c)) > best_abs * (1.0 + 1e-12)) {
      best_abs = std::abs(v(r, c));
      best = r;
    }
  }
  if (v.rows() > 0 && v(best, c) < 0.0) {
    for (std::size_t r = 0; r < v.rows(); ++r) v(r, c) = -v(r, c);
  }
}

}  // namespace detail

inline void require_symmetric(const Matrix& s, double tol = 1e-8) {
  if (s.rows() != s.cols()) throw DimensionError("symmetric matrix required, got non-square input");
  const double scale = std::max(1.0, detail::max_abs(s));
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j)
      if (std::abs(s(i, j) - s(j, i)) > tol * scale) {
        throw DataError("matrix is not symmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      }
}

// Top-k eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
inline EigenResult sym_eigen(const Matrix& s, std::size_t k) {
  require_symmetric(s);
  const std::size_t n = s.rows();
  if (k > n) throw DimensionError("sym_eigen: k=" + std::to_string(k) + " exceeds dimension " + std::to_string(n));

  Matrix a = s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (s(i, j) + s(j, i));
  Matrix v = Matrix::identity(n);

  const double total = frobenius_norm(a);
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= 1e-15 * total || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          const double arp = a(r, p);
          const double arq = a(r, q);
          a(r, p) = c * arp - sn * arq;
          a(r, q) = sn * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double apr = a(p, r);
          const double aqr = a(q, r);
          a(p, r) = c * apr - sn * aqr;
          a(q, r) = sn * apr + c * aqr;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p);
          const double vrq = v(r, q);
          v(r, p) = c * vrp - sn * vrq;
          v(r, q) = sn * vrp + c * vrq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  EigenResult out{Vector(k), Matrix(n, k)};
  for (std::size_t c = 0; c < k; ++c) {
    out.eigenvalues[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, c) = v(r, order[c]);
    detail::fix_sign(out.eigenvectors, c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// SPD solves.

namespace detail {

// Lower Cholesky factor of s + ridge*I; returns false when a pivot is not
// safely positive.
inline bool cholesky(const Matrix& s, double ridge, Matrix& l) {
  const std::size_t n = s.rows();
  l = Matrix(n, n);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(s(i, i) + ridge));
  const double floor = 1e-13 * std::max(max_diag, std::numeric_limits<double>::min());
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j) + ridge - dot(l.row(j).first(j), l.row(j).first(j));
    if (!(d > floor)) return false;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      l(i, j) = (s(i, j) - dot(l.row(i).first(j), l.row(j).first(j))) / ljj;
    }
  }
  return true;
}

inline Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  const std::size_t n = l.rows();
  Matrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = x(i, c);
      for (std::size_t k = 0; k < i; ++k) acc -= l(i, k) * x(k, c);
      x(i, c) = acc / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double acc = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) acc -= l(k, ii) * x(k, c);
      x(ii, c) = acc / l(ii, ii);
    }
  }
  return x;
}

inline Matrix regularized_product(const Matrix& s, double ridge, const Matrix& x) {
  Matrix r = matmul(s, x);
  for (std::size_t i = 0; i < r.rows(); ++i)
    for (std::size_t c = 0; c < r.cols(); ++c) r(i, c) += ridge * x(i, c);
  return r;
}

}  // namespace detail

// Solves (S + ridge*I) x = b by Cholesky with one step of iterative refinement.
inline Matrix solve_spd(const Matrix& s, const Matrix& b, double ridge) {
  require_symmetric(s);
  if (b.rows() != s.rows()) throw DimensionError("solve_spd: rhs has wrong row count");
  if (!(ridge >= 0.0)) throw DataError("solve_spd: ridge must be non-negative");
  Matrix l;
  if (!detail::cholesky(s, ridge, l)) {
    throw FactorizationError("solve_spd: factorization failed with ridge " + std::to_string(ridge));
  }
  Matrix x = detail::cholesky_solve(l, b);
  const Matrix residual = b - detail::regularized_product(s, ridge, x);
  x = x + detail::cholesky_solve(l, residual);
  if (!x.all_finite()) throw FactorizationError("solve_spd: non-finite solution");
  return x;
}

inline Vector solve_spd(const Matrix& s, const Vector& b, double ridge) {
  return solve_spd(s, Matrix::column(b), ridge).col_copy(0);
}

struct RegularizedSolve {
  Vector x;
  double ridge = 0.0;
};

// Default ridge: 1e-6 * trace(S)/dim.
inline double default_ridge(const Matrix& s) {
  double tr = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) tr += s(i, i);
  const double mean_diag = s.rows() == 0 ? 0.0 : tr / static_cast<double>(s.rows());
  return 1e-6 * (mean_diag > 0.0 ? mean_diag : 1.0);
}

// Tries `ridge` first (the default ridge when negative) and escalates x10 up
// to three times on factorization failure.
inline RegularizedSolve solve_spd_escalating(const Matrix& s, const Vector& b, double ridge = -1.0) {
  const double base = default_ridge(s);
  double r = ridge < 0.0 ? base : ridge;
  constexpr int kEscalations = 3;
  for (int attempt = 0;; ++attempt) {
    try {
      return {solve_spd(s, b, r), r};
    } catch (const FactorizationError&) {
      if (attempt == kEscalations) throw;
      r = std::max(r * 10.0, base);
    }
  }
}

}  // namespace sinktag
