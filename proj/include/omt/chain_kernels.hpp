#pragma once

// Dense contraction kernels behind the chain scaling iterations. Each kernel
// has a serial reference implementation and an OpenMP implementation that
// parallelizes over output entries; both perform identical arithmetic per
// output entry, so their results agree bitwise.

#include <span>

#include "omt/linalg.hpp"

namespace omt::kernels {

enum class Backend { Serial, OpenMP };

// out(j) = log sum_i exp(in(i) - cost(i, j) * inv_eps)
//
// `cost` is column-major with one column per output entry, so the sum for
// each output runs over contiguous memory. Terms more than 40 below the
// column maximum are dropped (relative contribution < 5e-18 each).
void log_contract_serial(const Matrix& cost, std::span<const double> in, double inv_eps,
                         std::span<double> out);
void log_contract_omp(const Matrix& cost, std::span<const double> in, double inv_eps,
                      std::span<double> out);

// out(j) = min_i (in(i) + cost(i, j)), with argmin(j) the first minimizing i.
void min_plus_serial(const Matrix& cost, std::span<const double> in, std::span<double> out,
                     std::span<int> argmin);
void min_plus_omp(const Matrix& cost, std::span<const double> in, std::span<double> out,
                  std::span<int> argmin);

// out(j) = sum_i in(i) * kernel(i, j), the plain (non-log) scaling path.
void scaled_contract_serial(const Matrix& kernel, std::span<const double> in,
                            std::span<double> out);
void scaled_contract_omp(const Matrix& kernel, std::span<const double> in,
                         std::span<double> out);

inline void log_contract(Backend b, const Matrix& cost, std::span<const double> in,
                         double inv_eps, std::span<double> out) {
  if (b == Backend::OpenMP)
    log_contract_omp(cost, in, inv_eps, out);
  else
    log_contract_serial(cost, in, inv_eps, out);
}

inline void min_plus(Backend b, const Matrix& cost, std::span<const double> in,
                     std::span<double> out, std::span<int> argmin) {
  if (b == Backend::OpenMP)
    min_plus_omp(cost, in, out, argmin);
  else
    min_plus_serial(cost, in, out, argmin);
}

inline void scaled_contract(Backend b, const Matrix& kernel, std::span<const double> in,
                            std::span<double> out) {
  if (b == Backend::OpenMP)
    scaled_contract_omp(kernel, in, out);
  else
    scaled_contract_serial(kernel, in, out);
}

}  // namespace omt::kernels
