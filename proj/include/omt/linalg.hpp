#pragma once

#include <Eigen/Dense>

namespace omt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Dense symmetric matrix. Storage is kept exactly symmetric: every
/// constructor symmetrizes, and there is no mutable element access.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(Eigen::Index n) : m_(Matrix::Zero(n, n)) {}

  /// Accepts `m` if it is symmetric to `rel_tol * max(1, |m|_F)`, then
  /// stores (m + m^T) / 2. Throws InvalidInput otherwise.
  static SymMatrix from(const Matrix& m, double rel_tol = 1e-9);
  /// Stores (m + m^T) / 2 without checking.
  static SymMatrix symmetrized(const Matrix& m);
  static SymMatrix identity(Eigen::Index n);

  Eigen::Index dim() const { return m_.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
  const Matrix& matrix() const { return m_; }
  operator const Matrix&() const { return m_; }

 private:
  Matrix m_;
};

struct SymEig {
  Vector values;   // descending
  Matrix vectors;  // orthonormal columns, vectors.col(i) pairs with values(i)
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Throws NotConverged if the off-diagonal mass does not vanish within the
/// sweep cap.
SymEig sym_eig(const SymMatrix& s);

/// e^{A t} by scaling and squaring with a diagonal Pade approximant.
Matrix matrix_exp(const Matrix& a, double t = 1.0);

/// Frobenius-nearest positive semidefinite matrix.
SymMatrix psd_project(const SymMatrix& s);

/// Smallest eigenvalue, used for PSD checks on inputs and outputs.
double min_eigenvalue(const SymMatrix& s);

/// Solves M X = B by LU with partial pivoting. Throws SingularMatrix when
/// the estimated condition number exceeds `max_condition`.
Matrix linear_solve(const Matrix& m, const Matrix& b, double max_condition = 1e14);
Vector linear_solve(const Matrix& m, const Vector& b, double max_condition = 1e14);

/// Reciprocal 1-norm condition estimate; 0 for exactly singular input.
double rcond_estimate(const Matrix& m);

/// Numerical rank with singular values below `rel_tol * sigma_max` treated as zero.
Eigen::Index numerical_rank(const Matrix& m, double rel_tol = 1e-10);

/// Orthonormal basis of the null space of `m` (columns), same threshold as numerical_rank.
Matrix null_space(const Matrix& m, double rel_tol = 1e-10);

bool all_finite(const Matrix& m);

}  // namespace omt
