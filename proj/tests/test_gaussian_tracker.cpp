#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <random>
#include <vector>

#include "omt/error.hpp"
#include "omt/gaussian_tracker.hpp"
#include "oracles.hpp"

using namespace omt;

namespace {

LinearSystem scalar_integrator() {
  return LinearSystem(Matrix::Zero(1, 1), Matrix::Identity(1, 1), Matrix::Identity(1, 1));
}

LinearSystem double_integrator() {
  return LinearSystem((Matrix(2, 2) << 0, 1, 0, 0).finished(), (Matrix(2, 1) << 0, 1).finished(),
                      (Matrix(1, 2) << 1, 0).finished());
}

SymMatrix sym1(double v) { return SymMatrix::symmetrized(Matrix::Constant(1, 1, v)); }

Matrix sqrtm(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

// Natural cubic spline through (t_k, y_k): knot slopes and the energy int (x'')^2.
struct NaturalSpline {
  std::vector<double> slope;
  double energy = 0.0;
};

NaturalSpline natural_spline(const std::vector<double>& t, const std::vector<double>& y) {
  const size_t n = t.size();
  Matrix a = Matrix::Zero(n, n);
  Vector rhs = Vector::Zero(n);
  a(0, 0) = a(n - 1, n - 1) = 1.0;
  for (size_t i = 1; i + 1 < n; ++i) {
    const double h0 = t[i] - t[i - 1], h1 = t[i + 1] - t[i];
    a(i, i - 1) = h0;
    a(i, i) = 2 * (h0 + h1);
    a(i, i + 1) = h1;
    rhs(i) = 6 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
  }
  const Vector m = a.fullPivLu().solve(rhs);  // second derivatives at knots
  NaturalSpline out;
  for (size_t i = 0; i + 1 < n; ++i) {
    const double h = t[i + 1] - t[i];
    out.slope.push_back((y[i + 1] - y[i]) / h - h * (2 * m(i) + m(i + 1)) / 6);
    out.energy += h * (m(i) * m(i) + m(i) * m(i + 1) + m(i + 1) * m(i + 1)) / 3;
  }
  const double h = t[n - 1] - t[n - 2];
  out.slope.push_back((y[n - 1] - y[n - 2]) / h + h * (m(n - 2) + 2 * m(n - 1)) / 6);
  return out;
}

}  // namespace

TEST_CASE("mean spline of a double integrator is the natural cubic spline") {
  const LinearSystem sys = double_integrator();
  {
    const std::vector<double> times = {0.0, 1.0, 2.0};
    const std::vector<Vector> means = {Vector::Constant(1, 0.0), Vector::Constant(1, 1.0),
                                       Vector::Constant(1, 0.0)};
    const MeanSpline sp = mean_spline(sys, times, means);
    CHECK(sp.cost == doctest::Approx(6.0).epsilon(1e-10));
    CHECK(sp.knots[0](1) == doctest::Approx(1.5).epsilon(1e-10));
    CHECK(std::abs(sp.knots[1](1)) < 1e-10);
  }
  std::mt19937_64 rng(301);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> times = {0.0};
    std::vector<double> ys;
    std::vector<Vector> means;
    for (int k = 0; k < 5; ++k) {
      if (k > 0) times.push_back(times.back() + 0.5 + std::abs(nd(rng)));
      ys.push_back(nd(rng));
      means.push_back(Vector::Constant(1, ys.back()));
    }
    const MeanSpline sp = mean_spline(sys, times, means);
    const NaturalSpline ref = natural_spline(times, ys);
    CHECK(sp.cost == doctest::Approx(ref.energy).epsilon(1e-9));
    for (size_t k = 0; k < times.size(); ++k) {
      CHECK(sp.knots[k](0) == doctest::Approx(ys[k]).epsilon(1e-12));
      CHECK(sp.knots[k](1) == doctest::Approx(ref.slope[k]).epsilon(1e-8).scale(1.0));
    }
  }
  CHECK_THROWS_AS(mean_spline(sys, {0.0}, {Vector::Zero(1)}), InvalidInput);
  CHECK_THROWS_AS(mean_spline(sys, {0.0, 1.0}, {Vector::Zero(1), Vector::Zero(2)}), InvalidInput);
}

TEST_CASE("scalar covariance interpolation has a closed form") {
  const LinearSystem sys = scalar_integrator();
  const std::vector<double> times = {0.0, 1.0};
  const CovarianceSolution sol = covariance_sdp(sys, times, {sym1(1.0), sym1(4.0)});
  CHECK(sol.objective == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(sol.plan.cross_cov[0](0, 0) == doctest::Approx(2.0).epsilon(1e-5));
  const MeanSpline sp = mean_spline(sys, times, {Vector::Zero(1), Vector::Ones(1)});
  const GaussianFlowPoint mid = gaussian_flow(sys, sp, sol.plan, 0.5);
  CHECK(std::sqrt(mid.cov(0, 0)) == doctest::Approx(1.5).epsilon(1e-4));
  CHECK(mid.mean(0) == doctest::Approx(0.5));
}

TEST_CASE("two-knot fully observed plans match the Gaussian transport closed form") {
  std::mt19937_64 rng(303);
  for (int trial = 0; trial < 4; ++trial) {
    const Eigen::Index n = 2 + trial % 2;
    const Matrix a = oracle::random_with_radius(rng, n, 0.5);
    const Matrix b = oracle::random_matrix(rng, n, n);
    const LinearSystem sys(a, b, Matrix::Identity(n, n));
    const double dt = 0.7 + 0.2 * trial;
    const Matrix s0 = oracle::random_psd(rng, n, 0.2), s1 = oracle::random_psd(rng, n, 0.2);
    const CovarianceSolution sol = covariance_sdp(
        sys, {0.0, dt}, {SymMatrix::symmetrized(s0), SymMatrix::symmetrized(s1)});

    // W2 between Q^{1/2} Phi x0 and Q^{1/2} x1 with the oracle's own Phi and Q.
    const Matrix phi = oracle::taylor_exp(a * dt);
    const Matrix q = oracle::gramian_quadrature(a, b, dt).inverse();
    const Matrix qh = sqrtm(q);
    const Matrix p0 = qh * phi * s0 * phi.transpose() * qh, p1 = qh * s1 * qh;
    const Matrix r0 = sqrtm(p0);
    const double ref = p0.trace() + p1.trace() - 2.0 * sqrtm(r0 * p1 * r0).trace();
    CHECK(sol.objective == doctest::Approx(ref).epsilon(1e-4));
  }
}

TEST_CASE("covariance plan is feasible and blocks are PSD") {
  std::mt19937_64 rng(305);
  const LinearSystem sys = double_integrator();
  const std::vector<double> times = {0.0, 1.0, 2.5, 3.0};
  std::vector<SymMatrix> covs;
  for (int k = 0; k < 4; ++k) covs.push_back(sym1(0.5 + k * 0.7));
  const CovarianceSolution sol = covariance_sdp(sys, times, covs);
  REQUIRE(sol.plan.state_cov.size() == 4);
  REQUIRE(sol.plan.cross_cov.size() == 3);
  for (size_t k = 0; k < 4; ++k)
    CHECK((sys.c() * sol.plan.state_cov[k].matrix() * sys.c().transpose())(0, 0) ==
          doctest::Approx(covs[k](0, 0)).epsilon(1e-5));
  for (const SymMatrix& blk : sol.plan.blocks) CHECK(min_eigenvalue(blk) >= -1e-12);
  CHECK(sol.diag.iterations > 0);
}

TEST_CASE("output cost form prices the cheapest lift") {
  std::mt19937_64 rng(307);
  const LinearSystem sys = double_integrator();
  const std::vector<double> times = {0.0, 1.0, 1.5, 3.0};
  const OutputCostForm form = output_cost_matrix(sys, times);
  REQUIRE(form.r.dim() == 4);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> ys;
    Vector y(4);
    for (int k = 0; k < 4; ++k) y(k) = oracle::random_matrix(rng, 1, 1)(0, 0);
    for (int k = 0; k < 4; ++k) ys.push_back(y(k));
    CHECK(y.dot(form.r.matrix() * y) ==
          doctest::Approx(natural_spline(times, ys).energy).epsilon(1e-9));
  }
}

TEST_CASE("joint-output and lifted formulations agree") {
  std::mt19937_64 rng(309);
  for (int trial = 0; trial < 3; ++trial) {
    const Matrix a = oracle::random_with_radius(rng, 3, 0.6);
    const Matrix b = oracle::random_matrix(rng, 3, 2);
    const Matrix c = oracle::random_matrix(rng, 2, 3);
    const LinearSystem sys(a, b, c);
    const std::vector<double> times = {0.0, 1.0, 2.0};
    std::vector<SymMatrix> covs;
    for (int k = 0; k < 3; ++k) covs.push_back(SymMatrix::symmetrized(oracle::random_psd(rng, 2, 0.3)));
    const CovarianceSolution lifted = covariance_sdp(sys, times, covs);
    const JointCovarianceSolution joint = covariance_sdp_joint(output_cost_matrix(sys, times), covs);
    CHECK(joint.objective == doctest::Approx(lifted.objective).epsilon(1e-4));
    CHECK(min_eigenvalue(joint.joint) >= -1e-12);
  }
}

TEST_CASE("gaussian flow reproduces knots and stays PSD") {
  const LinearSystem sys = double_integrator();
  const std::vector<double> times = {0.0, 1.0, 2.0};
  const std::vector<SymMatrix> covs = {sym1(1.0), sym1(0.2), sym1(2.0)};
  const std::vector<Vector> means = {Vector::Constant(1, -1.0), Vector::Constant(1, 1.0),
                                     Vector::Constant(1, 0.5)};
  const CovarianceSolution sol = covariance_sdp(sys, times, covs);
  const MeanSpline sp = mean_spline(sys, times, means);
  for (size_t k = 0; k < 3; ++k) {
    const GaussianFlowPoint f = gaussian_flow(sys, sp, sol.plan, times[k]);
    CHECK(f.mean(0) == doctest::Approx(means[k](0)).epsilon(1e-12));
    CHECK(f.cov(0, 0) == doctest::Approx(covs[k](0, 0)).epsilon(1e-5));
  }
  for (int i = 1; i < 100; ++i) {
    const GaussianFlowPoint f = gaussian_flow(sys, sp, sol.plan, 2.0 * i / 100.0);
    const SymEig e = sym_eig(f.state_cov);
    CHECK(e.values(e.values.size() - 1) >= -1e-8 * std::max(e.values(0), 1e-300));
  }
  CHECK_THROWS_AS(gaussian_flow(sys, sp, sol.plan, 2.5), InvalidInput);
}

TEST_CASE("a redundant intermediate marginal leaves the objective unchanged") {
  const LinearSystem sys = scalar_integrator();
  const double base = covariance_sdp(sys, {0.0, 1.0}, {sym1(1.0), sym1(4.0)}).objective;
  const double with_mid =
      covariance_sdp(sys, {0.0, 0.5, 1.0}, {sym1(1.0), sym1(2.25), sym1(4.0)}).objective;
  CHECK(with_mid <= base + 1e-5);
  CHECK(with_mid == doctest::Approx(base).epsilon(1e-4));
}

TEST_CASE("covariance input validation") {
  const LinearSystem sys = scalar_integrator();
  try {
    covariance_sdp(sys, {0.0, 1.0}, {sym1(1.0), sym1(-0.5)});
    FAIL("expected InvalidInput");
  } catch (const InvalidInput& e) {
    CHECK(std::string(e.what()).find("covariance 1") != std::string::npos);
  }
  CHECK_THROWS_AS(covariance_sdp(sys, {0.0, 1.0}, {sym1(1.0)}), InvalidInput);
  // Rank-deficient targets are accepted; regularize adds jitter with a warning.
  CHECK_NOTHROW(covariance_sdp(sys, {0.0, 1.0}, {sym1(0.0), sym1(1.0)}));
  SdpOptions o;
  o.regularize = true;
  const CovarianceSolution reg = covariance_sdp(sys, {0.0, 1.0}, {sym1(0.0), sym1(1.0)}, o);
  CHECK(reg.diag.warnings.size() == 1);
  o.max_iter = 3;
  o.regularize = false;
  CHECK_THROWS_AS(covariance_sdp(sys, {0.0, 1.0}, {sym1(1.0), sym1(4.0)}, o), NotConverged);

  GaussianSequence seq{{0.0, 1.0}, {Vector::Zero(1), Vector::Zero(1)}, {sym1(1.0), sym1(1.0)}};
  CHECK_NOTHROW(seq.validate(1));
  CHECK_THROWS_AS(seq.validate(2), InvalidInput);
  seq.times = {1.0, 0.0};
  CHECK_THROWS_AS(seq.validate(1), InvalidInput);
}
