#include <doctest.h>

#include <cmath>
#include <random>

#include "omt/error.hpp"
#include "omt/linalg.hpp"
#include "oracles.hpp"

using namespace omt;

namespace {

SymMatrix random_sym(std::mt19937_64& rng, Eigen::Index n) {
  return SymMatrix::symmetrized(oracle::random_matrix(rng, n, n));
}

}  // namespace

TEST_CASE("SymMatrix storage is exactly symmetric") {
  Matrix m(2, 2);
  m << 1, 2 + 1e-12, 2, 3;
  const SymMatrix s = SymMatrix::from(m);
  CHECK(s(0, 1) == s(1, 0));
  Matrix bad(2, 2);
  bad << 1, 2, 3, 4;
  CHECK_THROWS_AS(SymMatrix::from(bad), InvalidInput);
  CHECK_THROWS_AS(SymMatrix::from(Matrix::Zero(2, 3)), InvalidInput);
}

TEST_CASE("sym_eig on identity and diagonal matrices") {
  const SymEig id = sym_eig(SymMatrix::identity(3));
  CHECK(id.values.isApprox(Vector::Ones(3)));
  CHECK((id.vectors.transpose() * id.vectors - Matrix::Identity(3, 3)).norm() < 1e-12);

  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 3, 1, 2;
  const SymEig e = sym_eig(SymMatrix::symmetrized(d));
  CHECK(e.values(0) == doctest::Approx(3.0));
  CHECK(e.values(1) == doctest::Approx(2.0));
  CHECK(e.values(2) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig reconstructs random symmetric matrices") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 1 + trial % 12;
    const SymMatrix s = random_sym(rng, n);
    const SymEig e = sym_eig(s);
    const Matrix rec = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    CHECK((rec - s.matrix()).norm() <= 1e-12 * std::max(1.0, s.matrix().norm()));
    CHECK((e.vectors.transpose() * e.vectors - Matrix::Identity(n, n)).norm() <= 1e-12);
    for (Eigen::Index i = 1; i < n; ++i) CHECK(e.values(i - 1) >= e.values(i));
  }
}

TEST_CASE("sym_eig handles repeated and clustered eigenvalues") {
  std::mt19937_64 rng(5);
  const Matrix q = oracle::random_matrix(rng, 6, 6).householderQr().householderQ();
  Vector lam(6);
  lam << 2, 2, 2, 1e-9, 0, -1;
  const SymMatrix s = SymMatrix::symmetrized(q * lam.asDiagonal() * q.transpose());
  const SymEig e = sym_eig(s);
  CHECK(e.values(0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(e.values(5) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK((e.vectors * e.values.asDiagonal() * e.vectors.transpose() - s.matrix()).norm() < 1e-12 * 4);
}

TEST_CASE("matrix_exp closed forms") {
  CHECK(matrix_exp(Matrix::Zero(2, 2), 1.0).isApprox(Matrix::Identity(2, 2)));

  Matrix rot(2, 2);
  rot << 0, 1, -1, 0;
  Matrix expected(2, 2);
  expected << std::cos(1.0), std::sin(1.0), -std::sin(1.0), std::cos(1.0);
  CHECK((matrix_exp(rot, 1.0) - expected).norm() < 1e-14);

  Matrix d = Matrix::Zero(2, 2);
  d.diagonal() << 0.3, -2.0;
  const Matrix e = matrix_exp(d, 1.7);
  CHECK(e(0, 0) == doctest::Approx(std::exp(0.3 * 1.7)).epsilon(1e-14));
  CHECK(e(1, 1) == doctest::Approx(std::exp(-2.0 * 1.7)).epsilon(1e-14));
  CHECK(e(0, 1) == 0.0);
}

TEST_CASE("matrix_exp agrees with a Taylor oracle across norm regimes") {
  std::mt19937_64 rng(3);
  for (double scale : {1e-3, 0.1, 0.5, 1.5, 4.0, 20.0}) {
    const Matrix a = oracle::random_matrix(rng, 5, 5, scale);
    const Matrix ref = oracle::taylor_exp(a);
    CHECK((matrix_exp(a) - ref).norm() <= 1e-12 * std::max(1.0, ref.norm()));
  }
}

TEST_CASE("matrix_exp semigroup and inverse properties") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracle::random_matrix(rng, 4, 4);
    const double s = 0.3 + 0.1 * trial, t = 1.1 - 0.03 * trial;
    const Matrix lhs = matrix_exp(a, s + t);
    const Matrix rhs = matrix_exp(a, s) * matrix_exp(a, t);
    CHECK((lhs - rhs).norm() <= 1e-10 * lhs.norm());
    CHECK((matrix_exp(a, t) * matrix_exp(a, -t) - Matrix::Identity(4, 4)).norm() <= 1e-10);
  }
}

TEST_CASE("psd_project clamps negative eigenvalues") {
  Matrix d = Matrix::Zero(2, 2);
  d.diagonal() << 1, -1;
  const SymMatrix p = psd_project(SymMatrix::symmetrized(d));
  CHECK(p(0, 0) == doctest::Approx(1.0));
  CHECK(std::abs(p(1, 1)) < 1e-15);

  const SymMatrix neg = SymMatrix::symmetrized(-Matrix::Identity(3, 3));
  CHECK(psd_project(neg).matrix().norm() < 1e-15);

  std::mt19937_64 rng(9);
  const SymMatrix psd = SymMatrix::symmetrized(oracle::random_psd(rng, 5));
  CHECK((psd_project(psd).matrix() - psd.matrix()).norm() <= 1e-12 * psd.matrix().norm());
}

TEST_CASE("psd_project is idempotent and nearest") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const SymMatrix s = random_sym(rng, 2 + trial % 7);
    const SymMatrix p = psd_project(s);
    CHECK((psd_project(p).matrix() - p.matrix()).norm() <= 1e-12 * std::max(1.0, p.matrix().norm()));
    CHECK(min_eigenvalue(p) >= -1e-12 * std::max(1.0, p.matrix().norm()));
    // Any other PSD matrix is at least as far away.
    const SymMatrix other = SymMatrix::symmetrized(oracle::random_psd(rng, s.dim(), 0.0));
    CHECK((s.matrix() - p.matrix()).norm() <= (s.matrix() - other.matrix()).norm() + 1e-12);
  }
}

TEST_CASE("linear_solve residuals and singular detection") {
  const Vector b = Vector::LinSpaced(3, -1.0, 2.0);
  CHECK(linear_solve(Matrix::Identity(3, 3), b).isApprox(b));

  Matrix d = Matrix::Zero(2, 2);
  d.diagonal() << 2, 4;
  Vector rhs(2);
  rhs << 2, 8;
  const Vector x = linear_solve(d, rhs);
  CHECK(x(0) == doctest::Approx(1.0));
  CHECK(x(1) == doctest::Approx(2.0));

  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = oracle::random_matrix(rng, 8, 8) + 8.0 * Matrix::Identity(8, 8);
    const Vector r = oracle::random_matrix(rng, 8, 1).col(0);
    const Vector sol = linear_solve(m, r);
    CHECK((m * sol - r).norm() <= 1e-10 * (m.norm() * sol.norm() + r.norm()));
  }

  Matrix sing(2, 2);
  sing << 1, 2, 2, 4;
  try {
    linear_solve(sing, rhs);
    FAIL("expected SingularMatrix");
  } catch (const SingularMatrix& e) {
    CHECK(e.condition() > 1e14);
  }
}

TEST_CASE("rank and null space") {
  Matrix c(1, 3);
  c << 1, 0, 0;
  CHECK(numerical_rank(c) == 1);
  const Matrix ns = null_space(c);
  CHECK(ns.cols() == 2);
  CHECK((c * ns).norm() < 1e-14);
  CHECK((ns.transpose() * ns - Matrix::Identity(2, 2)).norm() < 1e-12);
}
