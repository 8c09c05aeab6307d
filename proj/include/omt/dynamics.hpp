#pragma once

#include <span>
#include <vector>

#include "omt/linalg.hpp"

namespace omt {

/// Prior dynamics x' = A x + B u with observation y = C x.
/// Construction validates shapes and that (A, B) is controllable.
class LinearSystem {
 public:
  LinearSystem(Matrix a, Matrix b, Matrix c);

  const Matrix& a() const { return a_; }
  const Matrix& b() const { return b_; }
  const Matrix& c() const { return c_; }
  Eigen::Index state_dim() const { return a_.rows(); }
  Eigen::Index input_dim() const { return b_.cols(); }
  Eigen::Index output_dim() const { return c_.rows(); }

 private:
  Matrix a_, b_, c_;
};

/// Kalman controllability matrix [B, AB, ..., A^{n-1}B].
Matrix controllability_matrix(const Matrix& a, const Matrix& b);

/// Transport data for one observation interval: the quadratic cost
/// (x1 - Phi x0)^T Q (x1 - Phi x0) with Q the inverse controllability Gramian.
struct StepKernel {
  double dt = 1.0;
  Matrix transition;   // e^{A dt}
  SymMatrix gramian;   // int_0^dt e^{A s} B B^T e^{A^T s} ds
  SymMatrix weight;    // gramian^{-1}
};

/// Controllability Gramian over [0, t] from one exponential of the
/// block matrix [[-A, B B^T], [0, A^T]] t.
SymMatrix gramian(const Matrix& a, const Matrix& b, double t);

/// Throws InvalidInput for dt <= 0 and SingularMatrix when the Gramian's
/// condition number exceeds 1e12.
StepKernel make_kernel(const LinearSystem& sys, double dt);

/// One kernel per interval of a strictly increasing time grid.
std::vector<StepKernel> make_kernels(const LinearSystem& sys, std::span<const double> times);

double step_cost(const StepKernel& k, const Vector& x0, const Vector& x1);

/// Minimum-energy interpolation between endpoints of one interval:
/// x*(s) = G x0 + H x1 at normalized time s in [0, 1].
struct BridgePair {
  double t = 0.0;
  Matrix g;
  Matrix h;
};

BridgePair bridge(const LinearSystem& sys, double s, double dt = 1.0);

/// Block tridiagonal H with x^T H x = sum_k step_cost(k_k, x_k, x_{k+1})
/// for the stacked state x = (x_0, ..., x_T).
SymMatrix chain_cost_form(std::span<const StepKernel> kernels);

struct ChainLift {
  std::vector<Vector> states;
  double cost = 0.0;
};

/// Cheapest state chain whose outputs are `outputs` (C x_k = y_k), found by
/// one KKT solve. Throws SingularMatrix naming a direction left free by the
/// constraints if the lift is not unique.
ChainLift lift_chain(std::span<const StepKernel> kernels, const Matrix& c,
                     std::span<const Vector> outputs);

/// The linear map behind lift_chain: stacked outputs (y_0, ..., y_T) to the
/// stacked cheapest chain (x_0, ..., x_T). Same failure modes.
Matrix lift_operator(std::span<const StepKernel> kernels, const Matrix& c);

}  // namespace omt
