#include "omt/linalg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "omt/error.hpp"

namespace omt {

SymMatrix SymMatrix::from(const Matrix& m, double rel_tol) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << "symmetric matrix must be square, got " << m.rows() << "x" << m.cols();
    throw InvalidInput(os.str());
  }
  if (!all_finite(m)) throw InvalidInput("matrix has non-finite entries");
  const double asym = (m - m.transpose()).norm();
  if (asym > rel_tol * std::max(1.0, m.norm())) {
    std::ostringstream os;
    os << "matrix is not symmetric (|M - M^T|_F = " << asym << ")";
    throw InvalidInput(os.str());
  }
  return symmetrized(m);
}

SymMatrix SymMatrix::symmetrized(const Matrix& m) {
  SymMatrix s;
  s.m_ = 0.5 * (m + m.transpose());
  return s;
}

SymMatrix SymMatrix::identity(Eigen::Index n) {
  SymMatrix s;
  s.m_ = Matrix::Identity(n, n);
  return s;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

SymEig sym_eig(const SymMatrix& sym) {
  const Eigen::Index n = sym.dim();
  Matrix a = sym.matrix();
  Matrix v = Matrix::Identity(n, n);
  const double scale = std::max(a.norm(), std::numeric_limits<double>::min());

  constexpr int kMaxSweeps = 100;
  double off = 0.0;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    off = 0.0;
    for (Eigen::Index q = 1; q < n; ++q)
      for (Eigen::Index p = 0; p < q; ++p) off += a(p, q) * a(p, q);
    off = std::sqrt(2.0 * off);
    if (off <= 1e-15 * scale) break;

    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        // Skip rotations that cannot change the diagonal in floating point.
        if (sweep > 3 && std::abs(apq) <= 1e-18 * (std::abs(a(p, p)) + std::abs(a(q, q)))) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    if (sweep == kMaxSweeps - 1) {
      std::ostringstream os;
      os << "Jacobi eigensolver did not converge; off-diagonal norm " << off;
      throw NotConverged(os.str(), off);
    }
  }

  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });
  SymEig out{Vector(n), Matrix(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = a(order[i], order[i]);
    out.vectors.col(i) = v.col(order[i]);
  }
  return out;
}

namespace {

// Pade coefficients and 1-norm thresholds for degrees 3, 5, 7, 9, 13.
constexpr std::array<double, 4> kPade3 = {120.0, 60.0, 12.0, 1.0};
constexpr std::array<double, 6> kPade5 = {30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0};
constexpr std::array<double, 8> kPade7 = {17297280.0, 8648640.0, 1995840.0, 277200.0,
                                          25200.0,    1512.0,    56.0,      1.0};
constexpr std::array<double, 10> kPade9 = {17643225600.0, 8821612800.0, 2075673600.0, 302702400.0,
                                           30270240.0,    2162160.0,    110880.0,     3960.0,
                                           90.0,          1.0};
constexpr std::array<double, 14> kPade13 = {
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
    129060195264000.0,   10559470521600.0,    670442572800.0,     33522128640.0,
    1323241920.0,        40840800.0,          960960.0,           16380.0,
    182.0,               1.0};
constexpr double kTheta3 = 1.495585217958292e-2;
constexpr double kTheta5 = 2.539398330063230e-1;
constexpr double kTheta7 = 9.504178996162932e-1;
constexpr double kTheta9 = 2.097847961257068e0;
constexpr double kTheta13 = 5.371920351148152e0;

template <size_t N>
Matrix pade_low(const Matrix& a, const std::array<double, N>& b) {
  const Eigen::Index n = a.rows();
  const Matrix id = Matrix::Identity(n, n);
  const Matrix a2 = a * a;
  Matrix u = b[1] * id;
  Matrix v = b[0] * id;
  Matrix power = id;
  for (size_t k = 2; k < N; k += 2) {
    power = power * a2;
    u += b[k + 1] * power;
    v += b[k] * power;
  }
  u = a * u;
  return (v - u).partialPivLu().solve(v + u);
}

Matrix pade13(const Matrix& a) {
  const auto& b = kPade13;
  const Eigen::Index n = a.rows();
  const Matrix id = Matrix::Identity(n, n);
  const Matrix a2 = a * a;
  const Matrix a4 = a2 * a2;
  const Matrix a6 = a4 * a2;
  Matrix u = a * (a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 +
                  b[3] * a2 + b[1] * id);
  Matrix v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 +
             b[0] * id;
  return (v - u).partialPivLu().solve(v + u);
}

}  // namespace

Matrix matrix_exp(const Matrix& a_in, double t) {
  if (a_in.rows() != a_in.cols()) throw InvalidInput("matrix_exp requires a square matrix");
  const Matrix a = a_in * t;
  if (a.rows() == 0) return a;
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  if (norm1 <= kTheta3) return pade_low(a, kPade3);
  if (norm1 <= kTheta5) return pade_low(a, kPade5);
  if (norm1 <= kTheta7) return pade_low(a, kPade7);
  if (norm1 <= kTheta9) return pade_low(a, kPade9);
  int squarings = 0;
  if (norm1 > kTheta13) squarings = static_cast<int>(std::ceil(std::log2(norm1 / kTheta13)));
  Matrix e = pade13(a / std::ldexp(1.0, squarings));
  for (int i = 0; i < squarings; ++i) e = e * e;
  return e;
}

SymMatrix psd_project(const SymMatrix& s) {
  const SymEig eig = sym_eig(s);
  const Vector clamped = eig.values.cwiseMax(0.0);
  return SymMatrix::symmetrized(eig.vectors * clamped.asDiagonal() * eig.vectors.transpose());
}

double min_eigenvalue(const SymMatrix& s) {
  if (s.dim() == 0) return 0.0;
  return sym_eig(s).values.minCoeff();
}

double rcond_estimate(const Matrix& m) {
  if (m.rows() == 0) return 1.0;
  Eigen::PartialPivLU<Matrix> lu(m);
  if (!lu.matrixLU().diagonal().allFinite()) return 0.0;
  if ((lu.matrixLU().diagonal().array() == 0.0).any()) return 0.0;
  return lu.rcond();
}

Matrix linear_solve(const Matrix& m, const Matrix& b, double max_condition) {
  if (m.rows() != m.cols()) throw InvalidInput("linear_solve requires a square matrix");
  if (m.rows() != b.rows()) throw InvalidInput("linear_solve: right-hand side has wrong row count");
  if (!all_finite(m) || !all_finite(b)) throw InvalidInput("linear_solve: non-finite input");
  if (m.rows() == 0) return b;
  Eigen::PartialPivLU<Matrix> lu(m);
  const double rc = (lu.matrixLU().diagonal().array() == 0.0).any() ? 0.0 : lu.rcond();
  if (!(rc * max_condition > 1.0)) {
    const double cond = rc > 0 ? 1.0 / rc : std::numeric_limits<double>::infinity();
    std::ostringstream os;
    os << "matrix is singular to working precision (condition estimate " << cond << ")";
    throw SingularMatrix(os.str(), cond);
  }
  return lu.solve(b);
}

Vector linear_solve(const Matrix& m, const Vector& b, double max_condition) {
  return linear_solve(m, Matrix(b), max_condition).col(0);
}

Eigen::Index numerical_rank(const Matrix& m, double rel_tol) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  return (sv.array() > rel_tol * sv(0)).count();
}

Matrix null_space(const Matrix& m, double rel_tol) {
  const Eigen::Index n = m.cols();
  if (m.rows() == 0) return Matrix::Identity(n, n);
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  Eigen::Index rank = 0;
  if (sv.size() > 0 && sv(0) > 0.0) rank = (sv.array() > rel_tol * sv(0)).count();
  return svd.matrixV().rightCols(n - rank);
}

}  // namespace omt
