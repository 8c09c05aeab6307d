#include "omt/gaussian_tracker.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "omt/error.hpp"

namespace omt {

namespace {

void check_psd_inputs(const std::vector<SymMatrix>& covs, Eigen::Index m) {
  for (size_t k = 0; k < covs.size(); ++k) {
    if (covs[k].dim() != m) {
      std::ostringstream os;
      os << "covariance " << k << " is " << covs[k].dim() << "x" << covs[k].dim()
         << ", expected " << m << "x" << m;
      throw InvalidInput(os.str());
    }
    if (!all_finite(covs[k].matrix())) {
      std::ostringstream os;
      os << "covariance " << k << " has non-finite entries";
      throw InvalidInput(os.str());
    }
    const double lo = min_eigenvalue(covs[k]);
    const double scale = std::max(1.0, covs[k].matrix().norm());
    if (lo < -1e-10 * scale) {
      std::ostringstream os;
      os << "covariance " << k << " is not positive semidefinite (min eigenvalue " << lo << ")";
      throw InvalidInput(os.str());
    }
  }
}

std::vector<SymMatrix> maybe_regularize(const std::vector<SymMatrix>& covs, const SdpOptions& opts,
                                        SdpDiagnostics& diag) {
  if (!opts.regularize) return covs;
  std::vector<SymMatrix> out;
  for (const SymMatrix& s : covs)
    out.push_back(SymMatrix::symmetrized(s.matrix() + 1e-10 * Matrix::Identity(s.dim(), s.dim())));
  diag.warnings.push_back("added 1e-10 I to every target covariance (regularize)");
  return out;
}

}  // namespace

void GaussianSequence::validate(Eigen::Index output_dim) const {
  if (times.size() < 2) throw InvalidInput("Gaussian sequence needs at least two frames");
  if (means.size() != times.size() || covariances.size() != times.size())
    throw InvalidInput("Gaussian sequence: times, means and covariances differ in length");
  for (size_t k = 0; k + 1 < times.size(); ++k)
    if (!(times[k + 1] > times[k])) throw InvalidInput("Gaussian sequence: times must increase");
  for (size_t k = 0; k < means.size(); ++k) {
    if (means[k].size() != output_dim || !means[k].allFinite()) {
      std::ostringstream os;
      os << "mean " << k << " must be a finite vector of length " << output_dim;
      throw InvalidInput(os.str());
    }
  }
  check_psd_inputs(covariances, output_dim);
}

MeanSpline mean_spline(const LinearSystem& sys, const std::vector<double>& times,
                       const std::vector<Vector>& means) {
  if (times.size() < 2) throw InvalidInput("mean_spline needs at least two knots");
  if (means.size() != times.size()) throw InvalidInput("mean_spline: one mean per time required");
  for (const Vector& mu : means)
    if (mu.size() != sys.output_dim()) throw InvalidInput("mean_spline: mean dimension mismatch");
  const auto kernels = make_kernels(sys, times);
  const ChainLift lift = lift_chain(kernels, sys.c(), means);
  return MeanSpline{times, lift.states, lift.cost};
}

CovarianceSolution covariance_sdp(const LinearSystem& sys, const std::vector<double>& times,
                                  const std::vector<SymMatrix>& covariances,
                                  const SdpOptions& opts) {
  const auto n = sys.state_dim(), m = sys.output_dim();
  if (covariances.size() != times.size() || times.size() < 2)
    throw InvalidInput("covariance_sdp: need one covariance per time and at least two times");
  check_psd_inputs(covariances, m);
  if (numerical_rank(sys.c()) != m) throw InvalidInput("covariance_sdp: C must have full row rank");

  CovarianceSolution out;
  const std::vector<SymMatrix> targets = maybe_regularize(covariances, opts, out.diag);
  const auto kernels = make_kernels(sys, times);
  const size_t steps = kernels.size();
  const Matrix& c = sys.c();

  // Precondition each knot by X_k = S_k X~_k S_k^T, S_k the square root of
  // the state covariance of the independent coupling pushed through the
  // cheapest-chain lift. That point is feasible and starts the solver; the
  // hidden directions otherwise sit at a scale ADMM takes ages to discover.
  std::vector<Matrix> root(steps + 1, Matrix::Identity(n, n));
  std::vector<Matrix> start;
  try {
    const Matrix lift = lift_operator(kernels, c);
    Matrix out_cov = Matrix::Zero(lift.cols(), lift.cols());
    for (size_t k = 0; k <= steps; ++k) {
      const auto o = static_cast<Eigen::Index>(k) * m;
      out_cov.block(o, o, m, m) = targets[k].matrix();
    }
    const Matrix state_cov = lift * out_cov * lift.transpose();
    for (size_t k = 0; k <= steps; ++k) {
      const auto o = static_cast<Eigen::Index>(k) * n;
      Matrix sk = state_cov.block(o, o, n, n);
      const double floor = 1e-6 * std::max(sk.trace() / static_cast<double>(n), 1e-12);
      sk.diagonal().array() += floor;
      const SymEig e = sym_eig(SymMatrix::symmetrized(sk));
      root[k] = e.vectors * e.values.cwiseMax(floor).cwiseSqrt().asDiagonal() * e.vectors.transpose();
    }
    for (size_t k = 0; k < steps; ++k)
      start.push_back(state_cov.block(static_cast<Eigen::Index>(k) * n,
                                      static_cast<Eigen::Index>(k) * n, 2 * n, 2 * n));
  } catch (const SingularMatrix&) {
    start.clear();
  }
  auto congruence = [&](size_t k) {
    Matrix d = Matrix::Zero(2 * n, 2 * n);
    d.topLeftCorner(n, n) = root[k];
    d.bottomRightCorner(n, n) = root[k + 1];
    return d;
  };
  std::vector<Matrix> c_knot(steps + 1), gram_inv(steps + 1);
  for (size_t k = 0; k <= steps; ++k) {
    c_knot[k] = c * root[k];
    gram_inv[k] = linear_solve(Matrix(c_knot[k] * c_knot[k].transpose()), Matrix(Matrix::Identity(m, m)));
  }

  BlockSdp sdp;
  for (size_t k = 0; k < steps; ++k) {
    Matrix lift(n, 2 * n);
    lift << -kernels[k].transition, Matrix::Identity(n, n);
    const Matrix d = congruence(k);
    sdp.objective.push_back(
        SymMatrix::symmetrized(d.transpose() * lift.transpose() * kernels[k].weight.matrix() * lift * d));
    if (!start.empty()) {
      const Matrix d_inv = linear_solve(d, Matrix(Matrix::Identity(2 * n, 2 * n)));
      sdp.initial.push_back(SymMatrix::symmetrized(d_inv * start[k] * d_inv.transpose()));
    }
  }
  // Consensus average of the shared diagonal blocks, then the affine
  // projection onto C S X~ S^T C^T = Sigma_k; off-diagonal blocks are free.
  sdp.project_affine = [&](const std::vector<SymMatrix>& v) {
    std::vector<Matrix> diag(steps + 1, Matrix::Zero(n, n));
    for (size_t k = 0; k < steps; ++k) {
      diag[k] += v[k].matrix().topLeftCorner(n, n);
      diag[k + 1] += v[k].matrix().bottomRightCorner(n, n);
    }
    for (size_t k = 0; k <= steps; ++k) {
      if (k > 0 && k < steps) diag[k] *= 0.5;
      const Matrix mis = c_knot[k] * diag[k] * c_knot[k].transpose() - targets[k].matrix();
      diag[k] -= c_knot[k].transpose() * (gram_inv[k] * mis * gram_inv[k]) * c_knot[k];
      diag[k] = 0.5 * (diag[k] + diag[k].transpose());
    }
    std::vector<SymMatrix> x(steps);
    for (size_t k = 0; k < steps; ++k) {
      Matrix blk = v[k].matrix();
      blk.topLeftCorner(n, n) = diag[k];
      blk.bottomRightCorner(n, n) = diag[k + 1];
      x[k] = SymMatrix::symmetrized(blk);
    }
    return x;
  };

  BlockSdpResult res = solve_block_sdp(sdp, opts);
  for (size_t k = 0; k < steps; ++k) {
    const Matrix d = congruence(k);
    res.x[k] = SymMatrix::symmetrized(d * res.x[k].matrix() * d.transpose());
  }
  out.objective = res.objective;
  out.diag.iterations = res.diag.iterations;
  out.diag.primal_residual = res.diag.primal_residual;
  out.diag.dual_residual = res.diag.dual_residual;
  out.diag.final_rho = res.diag.final_rho;
  for (size_t k = 0; k <= steps; ++k) {
    Matrix s = Matrix::Zero(n, n);
    int copies = 0;
    if (k < steps) {
      s += res.x[k].matrix().topLeftCorner(n, n);
      ++copies;
    }
    if (k > 0) {
      s += res.x[k - 1].matrix().bottomRightCorner(n, n);
      ++copies;
    }
    out.plan.state_cov.push_back(SymMatrix::symmetrized(s / copies));
  }
  for (size_t k = 0; k < steps; ++k) out.plan.cross_cov.push_back(res.x[k].matrix().topRightCorner(n, n));
  out.plan.blocks = std::move(res.x);
  return out;
}

OutputCostForm output_cost_matrix(const LinearSystem& sys, const std::vector<double>& times) {
  const auto kernels = make_kernels(sys, times);
  const Matrix h = chain_cost_form(kernels).matrix();
  const auto n = sys.state_dim(), m = sys.output_dim();
  const auto knots = static_cast<Eigen::Index>(times.size());
  const Matrix& c = sys.c();
  if (numerical_rank(c) != m) throw InvalidInput("output_cost_matrix: C must have full row rank");

  // x = P y + N z with C P = I and C N = 0 at every knot; eliminate z.
  const Matrix c_pinv = c.completeOrthogonalDecomposition().pseudoInverse();
  const Matrix c_null = null_space(c);
  const auto f = c_null.cols();
  Matrix p = Matrix::Zero(n * knots, m * knots);
  Matrix nz = Matrix::Zero(n * knots, f * knots);
  for (Eigen::Index k = 0; k < knots; ++k) {
    p.block(k * n, k * m, n, m) = c_pinv;
    if (f > 0) nz.block(k * n, k * f, n, f) = c_null;
  }
  const Matrix hyy = p.transpose() * h * p;
  Matrix r = hyy;
  if (f > 0) {
    const Matrix hzz = nz.transpose() * h * nz;
    const Matrix hzy = nz.transpose() * h * p;
    Matrix elim;
    try {
      elim = linear_solve(hzz, hzy, 1e12);
    } catch (const SingularMatrix& e) {
      std::ostringstream os;
      os << "output cost form is rank deficient: unobserved state directions are not pinned by "
            "the dynamics (condition "
         << e.condition() << ")";
      throw SingularMatrix(os.str(), e.condition());
    }
    r -= hzy.transpose() * elim;
  }
  return OutputCostForm{SymMatrix::symmetrized(r), m, static_cast<size_t>(knots)};
}

JointCovarianceSolution covariance_sdp_joint(const OutputCostForm& form,
                                             const std::vector<SymMatrix>& covariances,
                                             const SdpOptions& opts) {
  const auto m = form.output_dim;
  if (covariances.size() != form.knots)
    throw InvalidInput("covariance_sdp_joint: one covariance per knot required");
  check_psd_inputs(covariances, m);

  JointCovarianceSolution out;
  const std::vector<SymMatrix> targets = maybe_regularize(covariances, opts, out.diag);
  BlockSdp sdp;
  sdp.objective.push_back(form.r);
  sdp.project_affine = [&](const std::vector<SymMatrix>& v) {
    Matrix x = v[0].matrix();
    for (size_t k = 0; k < form.knots; ++k) {
      const auto o = static_cast<Eigen::Index>(k) * m;
      x.block(o, o, m, m) = targets[k].matrix();
    }
    return std::vector<SymMatrix>{SymMatrix::symmetrized(x)};
  };
  BlockSdpResult res = solve_block_sdp(sdp, opts);
  out.joint = res.x[0];
  out.objective = res.objective;
  out.diag.iterations = res.diag.iterations;
  out.diag.primal_residual = res.diag.primal_residual;
  out.diag.dual_residual = res.diag.dual_residual;
  out.diag.final_rho = res.diag.final_rho;
  return out;
}

GaussianFlowPoint gaussian_flow(const LinearSystem& sys, const MeanSpline& spline,
                                const StateCovariancePlan& plan, double t) {
  const auto& times = spline.times;
  if (times.size() < 2 || plan.state_cov.size() != times.size() ||
      plan.cross_cov.size() + 1 != times.size() || spline.knots.size() != times.size())
    throw InvalidInput("gaussian_flow: spline and plan do not match");
  if (!(t >= times.front() && t <= times.back())) {
    std::ostringstream os;
    os << "flow time " << t << " is outside [" << times.front() << ", " << times.back() << "]";
    throw InvalidInput(os.str());
  }
  size_t k = static_cast<size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
  k = std::min(k == 0 ? 0 : k - 1, times.size() - 2);
  const double dt = times[k + 1] - times[k];
  const double s = std::clamp((t - times[k]) / dt, 0.0, 1.0);
  const BridgePair br = bridge(sys, s, dt);
  const auto n = sys.state_dim();

  Matrix joint(2 * n, 2 * n);
  if (plan.blocks.size() == plan.cross_cov.size())
    joint = plan.blocks[k].matrix();
  else
    joint << plan.state_cov[k].matrix(), plan.cross_cov[k], plan.cross_cov[k].transpose(),
        plan.state_cov[k + 1].matrix();
  Matrix gh(n, 2 * n);
  gh << br.g, br.h;

  GaussianFlowPoint out;
  out.t = t;
  out.state_mean = br.g * spline.knots[k] + br.h * spline.knots[k + 1];
  out.state_cov = SymMatrix::symmetrized(gh * joint * gh.transpose());
  out.mean = sys.c() * out.state_mean;
  out.cov = SymMatrix::symmetrized(sys.c() * out.state_cov.matrix() * sys.c().transpose());
  return out;
}

}  // namespace omt
