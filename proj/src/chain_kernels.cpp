#include "omt/chain_kernels.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "omt/error.hpp"

namespace omt::kernels {

namespace {

constexpr double kDropBelow = 40.0;

// One pass fills `buf` and finds the maximum; only entries within
// kDropBelow of it reach exp().
inline double log_contract_column(const double* col, const double* in, Eigen::Index rows,
                                  double inv_eps, double* buf) {
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double v = in[i] - col[i] * inv_eps;
    buf[i] = v;
    top = v > top ? v : top;
  }
  if (top == -std::numeric_limits<double>::infinity()) return top;
  const double floor = top - kDropBelow;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i)
    if (buf[i] > floor) sum += std::exp(buf[i] - top);
  return top + std::log(sum);
}

inline double min_plus_column(const double* col, const double* in, Eigen::Index rows, int* arg) {
  double best = std::numeric_limits<double>::infinity();
  int where = -1;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double v = in[i] + col[i];
    if (v < best) {
      best = v;
      where = static_cast<int>(i);
    }
  }
  *arg = where;
  return best;
}

void check_shapes(const Matrix& m, size_t in, size_t out) {
  if (static_cast<size_t>(m.rows()) != in || static_cast<size_t>(m.cols()) != out)
    throw InvalidInput("kernel contraction: operand shapes do not match");
}

}  // namespace

void log_contract_serial(const Matrix& cost, std::span<const double> in, double inv_eps,
                         std::span<double> out) {
  check_shapes(cost, in.size(), out.size());
  const Eigen::Index rows = cost.rows();
  std::vector<double> buf(static_cast<size_t>(rows));
  for (Eigen::Index j = 0; j < cost.cols(); ++j)
    out[j] = log_contract_column(cost.col(j).data(), in.data(), rows, inv_eps, buf.data());
}

void log_contract_omp(const Matrix& cost, std::span<const double> in, double inv_eps,
                      std::span<double> out) {
  check_shapes(cost, in.size(), out.size());
  const Eigen::Index rows = cost.rows(), cols = cost.cols();
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<size_t>(rows));
#pragma omp for schedule(static)
    for (Eigen::Index j = 0; j < cols; ++j)
      out[j] = log_contract_column(cost.col(j).data(), in.data(), rows, inv_eps, buf.data());
  }
}

void min_plus_serial(const Matrix& cost, std::span<const double> in, std::span<double> out,
                     std::span<int> argmin) {
  check_shapes(cost, in.size(), out.size());
  const Eigen::Index rows = cost.rows();
  for (Eigen::Index j = 0; j < cost.cols(); ++j)
    out[j] = min_plus_column(cost.col(j).data(), in.data(), rows, &argmin[j]);
}

void min_plus_omp(const Matrix& cost, std::span<const double> in, std::span<double> out,
                  std::span<int> argmin) {
  check_shapes(cost, in.size(), out.size());
  const Eigen::Index rows = cost.rows(), cols = cost.cols();
#pragma omp parallel for schedule(static)
  for (Eigen::Index j = 0; j < cols; ++j)
    out[j] = min_plus_column(cost.col(j).data(), in.data(), rows, &argmin[j]);
}

void scaled_contract_serial(const Matrix& kernel, std::span<const double> in,
                            std::span<double> out) {
  check_shapes(kernel, in.size(), out.size());
  const Eigen::Index rows = kernel.rows();
  for (Eigen::Index j = 0; j < kernel.cols(); ++j) {
    const double* col = kernel.col(j).data();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) sum += in[i] * col[i];
    out[j] = sum;
  }
}

void scaled_contract_omp(const Matrix& kernel, std::span<const double> in,
                         std::span<double> out) {
  check_shapes(kernel, in.size(), out.size());
  const Eigen::Index rows = kernel.rows(), cols = kernel.cols();
#pragma omp parallel for schedule(static)
  for (Eigen::Index j = 0; j < cols; ++j) {
    const double* col = kernel.col(j).data();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) sum += in[i] * col[i];
    out[j] = sum;
  }
}

}  // namespace omt::kernels
