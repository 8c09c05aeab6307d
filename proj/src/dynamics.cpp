#include "omt/dynamics.hpp"

#include <cmath>
#include <sstream>

#include "omt/error.hpp"

namespace omt {

LinearSystem::LinearSystem(Matrix a, Matrix b, Matrix c)
    : a_(std::move(a)), b_(std::move(b)), c_(std::move(c)) {
  const auto n = a_.rows();
  if (n == 0 || a_.cols() != n) throw InvalidInput("A must be a non-empty square matrix");
  if (b_.rows() != n || b_.cols() == 0) {
    std::ostringstream os;
    os << "B must have " << n << " rows and at least one column, got " << b_.rows() << "x"
       << b_.cols();
    throw InvalidInput(os.str());
  }
  if (c_.cols() != n || c_.rows() == 0) {
    std::ostringstream os;
    os << "C must have " << n << " columns and at least one row, got " << c_.rows() << "x"
       << c_.cols();
    throw InvalidInput(os.str());
  }
  if (!all_finite(a_) || !all_finite(b_) || !all_finite(c_))
    throw InvalidInput("system matrices must be finite");
  const auto rank = numerical_rank(controllability_matrix(a_, b_), 1e-10);
  if (rank < n) {
    std::ostringstream os;
    os << "(A, B) is not controllable: Kalman matrix has rank " << rank << " < " << n;
    throw InvalidInput(os.str());
  }
}

Matrix controllability_matrix(const Matrix& a, const Matrix& b) {
  const auto n = a.rows(), p = b.cols();
  Matrix k(n, n * p);
  Matrix block = b;
  for (Eigen::Index i = 0; i < n; ++i) {
    k.middleCols(i * p, p) = block;
    block = a * block;
  }
  return k;
}

SymMatrix gramian(const Matrix& a, const Matrix& b, double t) {
  const auto n = a.rows();
  Matrix aug = Matrix::Zero(2 * n, 2 * n);
  aug.topLeftCorner(n, n) = -a;
  aug.topRightCorner(n, n) = b * b.transpose();
  aug.bottomRightCorner(n, n) = a.transpose();
  const Matrix e = matrix_exp(aug, t);
  return SymMatrix::symmetrized(e.bottomRightCorner(n, n).transpose() * e.topRightCorner(n, n));
}

StepKernel make_kernel(const LinearSystem& sys, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) {
    std::ostringstream os;
    os << "interval length must be positive, got " << dt;
    throw InvalidInput(os.str());
  }
  StepKernel k;
  k.dt = dt;
  k.transition = matrix_exp(sys.a(), dt);
  k.gramian = gramian(sys.a(), sys.b(), dt);
  const auto n = sys.state_dim();
  try {
    k.weight = SymMatrix::symmetrized(linear_solve(k.gramian.matrix(), Matrix(Matrix::Identity(n, n)), 1e12));
  } catch (const SingularMatrix& e) {
    std::ostringstream os;
    os << "controllability Gramian over dt = " << dt << " is numerically singular (condition "
       << e.condition() << "); use a longer interval or check that (A, B) is well controllable";
    throw SingularMatrix(os.str(), e.condition());
  }
  return k;
}

std::vector<StepKernel> make_kernels(const LinearSystem& sys, std::span<const double> times) {
  if (times.size() < 2) throw InvalidInput("need at least two observation times");
  std::vector<StepKernel> out;
  out.reserve(times.size() - 1);
  for (size_t k = 0; k + 1 < times.size(); ++k) {
    if (!(times[k + 1] > times[k])) {
      std::ostringstream os;
      os << "times must be strictly increasing (times[" << k + 1 << "] = " << times[k + 1]
         << " <= times[" << k << "] = " << times[k] << ")";
      throw InvalidInput(os.str());
    }
    out.push_back(make_kernel(sys, times[k + 1] - times[k]));
  }
  return out;
}

double step_cost(const StepKernel& k, const Vector& x0, const Vector& x1) {
  const Vector r = x1 - k.transition * x0;
  return std::max(0.0, r.dot(k.weight.matrix() * r));
}

BridgePair bridge(const LinearSystem& sys, double s, double dt) {
  if (!(s >= 0.0 && s <= 1.0)) throw InvalidInput("bridge time must lie in [0, 1]");
  const StepKernel k = make_kernel(sys, dt);
  const auto n = sys.state_dim();
  BridgePair out;
  out.t = s;
  if (s == 0.0) {
    out.g = Matrix::Identity(n, n);
    out.h = Matrix::Zero(n, n);
    return out;
  }
  if (s == 1.0) {
    out.g = Matrix::Zero(n, n);
    out.h = Matrix::Identity(n, n);
    return out;
  }
  const double tau = s * dt;
  // N(tau) = W(tau) e^{A^T (dt - tau)} maps the costate to the displacement.
  const Matrix nmat = gramian(sys.a(), sys.b(), tau).matrix() *
                      matrix_exp(sys.a().transpose(), dt - tau);
  out.h = nmat * k.weight.matrix();
  out.g = matrix_exp(sys.a(), tau) - out.h * k.transition;
  return out;
}

SymMatrix chain_cost_form(std::span<const StepKernel> kernels) {
  if (kernels.empty()) throw InvalidInput("chain needs at least one interval");
  const auto n = kernels.front().transition.rows();
  const auto steps = static_cast<Eigen::Index>(kernels.size());
  Matrix h = Matrix::Zero(n * (steps + 1), n * (steps + 1));
  for (Eigen::Index k = 0; k < steps; ++k) {
    const Matrix& phi = kernels[k].transition;
    const Matrix& q = kernels[k].weight.matrix();
    h.block(k * n, k * n, n, n) += phi.transpose() * q * phi;
    h.block(k * n, (k + 1) * n, n, n) -= phi.transpose() * q;
    h.block((k + 1) * n, k * n, n, n) -= q * phi;
    h.block((k + 1) * n, (k + 1) * n, n, n) += q;
  }
  return SymMatrix::symmetrized(h);
}

namespace {

Matrix chain_kkt(std::span<const StepKernel> kernels, const Matrix& c) {
  const auto n = c.cols(), m = c.rows();
  const auto knots = static_cast<Eigen::Index>(kernels.size() + 1);
  const Eigen::Index nx = n * knots, nc = m * knots;
  Matrix kkt = Matrix::Zero(nx + nc, nx + nc);
  kkt.topLeftCorner(nx, nx) = 2.0 * chain_cost_form(kernels).matrix();
  for (Eigen::Index k = 0; k < knots; ++k) {
    kkt.block(nx + k * m, k * n, m, n) = c;
    kkt.block(k * n, nx + k * m, n, m) = c.transpose();
  }
  return kkt;
}

template <typename Rhs>
Rhs solve_chain_kkt(const Matrix& kkt, const Rhs& rhs, Eigen::Index nx) {
  try {
    return linear_solve(kkt, rhs, 1e13);
  } catch (const SingularMatrix& e) {
    const Eigen::Index nc = kkt.rows() - nx;
    Matrix stacked(nx + nc, nx);
    stacked << 0.5 * kkt.topLeftCorner(nx, nx), kkt.bottomLeftCorner(nc, nx);
    const Matrix free_dirs = null_space(stacked, 1e-9);
    std::ostringstream os;
    os << "state chain is not pinned by the output constraints (" << free_dirs.cols()
       << "-dimensional unconstrained subspace";
    if (free_dirs.cols() > 0) {
      Eigen::IOFormat fmt(4, Eigen::DontAlignCols, ", ", ", ", "", "", "[", "]");
      os << ", e.g. direction " << free_dirs.col(0).transpose().format(fmt);
    }
    os << ")";
    throw SingularMatrix(os.str(), e.condition());
  }
}

}  // namespace

ChainLift lift_chain(std::span<const StepKernel> kernels, const Matrix& c,
                     std::span<const Vector> outputs) {
  if (outputs.size() != kernels.size() + 1)
    throw InvalidInput("lift_chain: need one output per knot");
  const auto n = c.cols(), m = c.rows();
  const auto knots = static_cast<Eigen::Index>(outputs.size());
  const Eigen::Index nx = n * knots, nc = m * knots;
  const Matrix kkt = chain_kkt(kernels, c);
  Vector rhs = Vector::Zero(nx + nc);
  for (Eigen::Index k = 0; k < knots; ++k) {
    if (outputs[k].size() != m) throw InvalidInput("lift_chain: output dimension mismatch");
    rhs.segment(nx + k * m, m) = outputs[k];
  }
  const Vector sol = solve_chain_kkt(kkt, rhs, nx);

  ChainLift out;
  out.states.reserve(outputs.size());
  for (Eigen::Index k = 0; k < knots; ++k) out.states.push_back(sol.segment(k * n, n));
  const Vector x = sol.head(nx);
  out.cost = std::max(0.0, 0.5 * x.dot(kkt.topLeftCorner(nx, nx) * x));
  return out;
}

Matrix lift_operator(std::span<const StepKernel> kernels, const Matrix& c) {
  const auto n = c.cols(), m = c.rows();
  const auto knots = static_cast<Eigen::Index>(kernels.size() + 1);
  const Eigen::Index nx = n * knots, nc = m * knots;
  const Matrix kkt = chain_kkt(kernels, c);
  Matrix rhs = Matrix::Zero(nx + nc, nc);
  rhs.bottomRows(nc) = Matrix::Identity(nc, nc);
  return solve_chain_kkt(kkt, rhs, nx).topRows(nx);
}

}  // namespace omt
