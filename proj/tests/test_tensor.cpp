#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "sinktag/tensor.hpp"
#include "support.hpp"

using namespace sinktag;
using testing_support::random_matrix;

namespace {

Matrix triple_loop(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

double max_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Eigenvalues by power iteration with Hotelling deflation.
Vector power_deflation(Matrix s, std::size_t k) {
  const std::size_t n = s.rows();
  Vector out;
  Rng rng(99);
  for (std::size_t e = 0; e < k; ++e) {
    Vector v(n);
    for (double& x : v) x = rng.uniform(-1, 1);
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
      Vector w(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) w[i] += s(i, j) * v[j];
      double nw = 0.0;
      for (double x : w) nw += x * x;
      nw = std::sqrt(nw);
      if (nw == 0.0) break;
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
    }
    Vector sv(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) sv[i] += s(i, j) * v[j];
    for (std::size_t i = 0; i < n; ++i) lambda += v[i] * sv[i];
    out.push_back(lambda);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s(i, j) -= lambda * v[i] * v[j];
  }
  return out;
}

// Gauss-Jordan inverse with partial pivoting.
Matrix dense_inverse(Matrix a) {
  const std::size_t n = a.rows();
  Matrix inv = Matrix::identity(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(p, c))) p = r;
    for (std::size_t j = 0; j < n; ++j) {
      std::swap(a(c, j), a(p, j));
      std::swap(inv(c, j), inv(p, j));
    }
    const double d = a(c, c);
    for (std::size_t j = 0; j < n; ++j) {
      a(c, j) /= d;
      inv(c, j) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a(r, c);
      for (std::size_t j = 0; j < n; ++j) {
        a(r, j) -= f * a(c, j);
        inv(r, j) -= f * inv(c, j);
      }
    }
  }
  return inv;
}

Matrix random_orthogonal(Rng& rng, std::size_t n) {
  Matrix q = random_matrix(rng, n, n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double proj = 0.0;
      for (std::size_t r = 0; r < n; ++r) proj += q(r, p) * q(r, c);
      for (std::size_t r = 0; r < n; ++r) q(r, c) -= proj * q(r, p);
    }
    const double nc = norm(q.col_copy(c));
    for (std::size_t r = 0; r < n; ++r) q(r, c) /= nc;
  }
  return q;
}

Matrix random_spd(Rng& rng, std::size_t n) {
  const Matrix g = random_matrix(rng, n, n);
  Matrix s = matmul_tn(g, g);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += 0.1;
  return s;
}

}  // namespace

TEST(Matmul, IdentityAndHandCases) {
  const Matrix m{{1, 2}, {3, 4}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
  const Matrix r = matmul(Matrix{{1, 2}}, Matrix{{3}, {4}});
  ASSERT_EQ(r.rows(), 1u);
  EXPECT_DOUBLE_EQ(r(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 5, 4), b = random_matrix(rng, 4, 3);
  EXPECT_LE(max_diff(matmul(a, b), triple_loop(a, b)), 1e-12);
  EXPECT_LE(max_diff(matmul_tn(transpose(a), b), triple_loop(a, b)), 1e-12);
  EXPECT_LE(max_diff(matmul_nt(a, transpose(b)), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
  EXPECT_THROW(matvec(Matrix(2, 3), Vector(2)), DimensionError);
}

TEST(Matmul, Associativity) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(rng, 6, 5), b = random_matrix(rng, 5, 7), c = random_matrix(rng, 7, 4);
    const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    EXPECT_LE(max_diff(l, r), 1e-10 * std::max(1.0, frobenius_norm(l)));
  }
}

TEST(CausalSoftmax, ZerosGiveUniformPrefix) {
  const Matrix a = causal_softmax_rows(Matrix(3, 3));
  EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(a(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(a(1, 1), 0.5);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a(2, j), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(a(0, 1), 0.0);
  EXPECT_EQ(a(0, 2), 0.0);
  EXPECT_EQ(a(1, 2), 0.0);
}

TEST(CausalSoftmax, AnalyticRow) {
  Matrix s(2, 2);
  s(1, 1) = std::log(3.0);
  const Matrix a = causal_softmax_rows(s);
  EXPECT_NEAR(a(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(a(1, 1), 0.75, 1e-15);
}

TEST(CausalSoftmax, RandomRowsStochasticAndMasked) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = causal_softmax_rows(random_matrix(rng, 6, 6, -30, 30));
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(pairwise_sum(a.row(i)), 1.0, 1e-12);
      for (std::size_t j = 0; j < 6; ++j) {
        if (j > i) {
          EXPECT_EQ(a(i, j), 0.0);
        }
        EXPECT_GE(a(i, j), 0.0);
        EXPECT_LE(a(i, j), 1.0);
      }
    }
  }
}

TEST(CausalSoftmax, LargeLogitsStayFinite) {
  Matrix s(2, 2);
  s(1, 0) = 1000.0;
  s(1, 1) = -1000.0;
  const Matrix a = causal_softmax_rows(s);
  EXPECT_TRUE(a.all_finite());
  EXPECT_DOUBLE_EQ(a(1, 0), 1.0);
}

TEST(SymEigen, Diagonal) {
  const auto r = sym_eigen(Matrix{{3, 0}, {0, 1}}, 2);
  EXPECT_DOUBLE_EQ(r.eigenvalues[0], 3.0);
  EXPECT_DOUBLE_EQ(r.eigenvalues[1], 1.0);
  EXPECT_EQ(r.eigenvectors, Matrix::identity(2));
}

TEST(SymEigen, Classic2x2) {
  const auto r = sym_eigen(Matrix{{2, 1}, {1, 2}}, 2);
  EXPECT_NEAR(r.eigenvalues[0], 3.0, 1e-14);
  EXPECT_NEAR(r.eigenvalues[1], 1.0, 1e-14);
  const double h = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(r.eigenvectors(0, 0), h, 1e-14);
  EXPECT_NEAR(r.eigenvectors(1, 0), h, 1e-14);
  // (1,-1)/sqrt2 and (-1,1)/sqrt2 tie on magnitude; the first wins.
  EXPECT_NEAR(r.eigenvectors(0, 1), h, 1e-14);
  EXPECT_NEAR(r.eigenvectors(1, 1), -h, 1e-14);
}

TEST(SymEigen, MatchesPowerIterationOracle) {
  Rng rng(4);
  const Matrix g = random_matrix(rng, 8, 8);
  const Matrix s = matmul_tn(g, g);
  const auto r = sym_eigen(s, 8);
  const Vector oracle = power_deflation(s, 8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(r.eigenvalues[i], oracle[i], 1e-8 * oracle[0]) << i;
}

TEST(SymEigen, KnownSpectrum) {
  Rng rng(5);
  const Matrix q = random_orthogonal(rng, 8);
  Matrix d(8, 8);
  for (std::size_t i = 0; i < 8; ++i) d(i, i) = 8.0 - static_cast<double>(i);
  const Matrix s = matmul_nt(matmul(q, d), q);
  const auto r = sym_eigen(s, 8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(r.eigenvalues[i], 8.0 - static_cast<double>(i), 1e-10);
}

TEST(SymEigen, OrthonormalAndReconstructs) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix s = random_spd(rng, 12);
    const auto r = sym_eigen(s, 12);
    EXPECT_LE(max_diff(matmul_tn(r.eigenvectors, r.eigenvectors), Matrix::identity(12)), 1e-10);
    Matrix d(12, 12);
    for (std::size_t i = 0; i < 12; ++i) {
      d(i, i) = r.eigenvalues[i];
      EXPECT_GE(r.eigenvalues[i], -1e-10);
      if (i > 0) {
        EXPECT_LE(r.eigenvalues[i], r.eigenvalues[i - 1]);
      }
    }
    const Matrix rec = matmul_nt(matmul(r.eigenvectors, d), r.eigenvectors);
    EXPECT_LE(frobenius_norm(s - rec), 1e-8 * frobenius_norm(s));
  }
}

TEST(SymEigen, SignRule) {
  Rng rng(7);
  const auto r = sym_eigen(random_spd(rng, 6), 6);
  for (std::size_t c = 0; c < 6; ++c) {
    const Vector v = r.eigenvectors.col_copy(c);
    const auto it = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    EXPECT_GT(*it, 0.0);
  }
}

TEST(SymEigen, Errors) {
  EXPECT_THROW(sym_eigen(Matrix{{1, 2}, {0, 1}}, 2), DataError);
  EXPECT_THROW(sym_eigen(Matrix::identity(2), 3), DimensionError);
  EXPECT_THROW(sym_eigen(Matrix(2, 3), 1), DimensionError);
}

TEST(SolveSpd, HandCases) {
  const Vector x = solve_spd(Matrix::identity(3), Vector{1, 2, 3}, 0.0);
  EXPECT_EQ(x, (Vector{1, 2, 3}));
  const Vector y = solve_spd(Matrix{{2, 0}, {0, 4}}, Vector{2, 4}, 0.0);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(SolveSpd, SingularRankOneWithRidge) {
  const Vector u{1, 2, 3};
  Matrix s(3, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) s(i, j) = u[i] * u[j];
  const double ridge = 1e-6;
  const Vector b{1, 0, -1};
  const Vector x = solve_spd(s, b, ridge);
  Matrix reg = s;
  for (std::size_t i = 0; i < 3; ++i) reg(i, i) += ridge;
  const Vector oracle = matvec(dense_inverse(reg), b);
  const Vector res = matvec(reg, x);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(std::isfinite(x[i]));
    EXPECT_NEAR(res[i], b[i], 1e-8 * norm(b));
    EXPECT_NEAR(x[i], oracle[i], 1e-6 * norm(oracle));
  }
}

TEST(SolveSpd, SingularWithoutRidgeFails) {
  EXPECT_THROW(solve_spd(Matrix{{1, 1}, {1, 1}}, Vector{1, 0}, 0.0), FactorizationError);
  EXPECT_THROW(solve_spd(Matrix::identity(2), Vector{1, 0}, -1.0), DataError);
}

TEST(SolveSpd, RandomResidualUpTo64) {
  Rng rng(8);
  for (std::size_t n : {1u, 2u, 5u, 16u, 64u}) {
    const Matrix s = random_spd(rng, n);
    Vector b(n);
    for (double& v : b) v = rng.uniform(-1, 1);
    const Vector x = solve_spd(s, b, 0.0);
    const Vector r = matvec(s, x);
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) err += (r[i] - b[i]) * (r[i] - b[i]);
    EXPECT_LE(std::sqrt(err), 1e-8 * norm(b)) << n;
  }
}

TEST(SolveSpd, EscalationReachesWorkingRidge) {
  // Negative-definite direction: no ridge in the escalation ladder rescues it.
  EXPECT_THROW(solve_spd_escalating(Matrix{{1, 0}, {0, -1}}, Vector{1, 1}), FactorizationError);
  const auto r = solve_spd_escalating(Matrix{{1, 1}, {1, 1}}, Vector{1, 1});
  EXPECT_DOUBLE_EQ(r.ridge, 1e-6);
  EXPECT_NEAR(r.x[0] + r.x[1], 2.0 / (2.0 + 1e-6), 1e-9);
}
