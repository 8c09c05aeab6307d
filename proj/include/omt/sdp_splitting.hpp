#pragma once

#include <functional>
#include <string>
#include <vector>

#include "omt/chain_kernels.hpp"
#include "omt/linalg.hpp"

namespace omt {

struct SdpOptions {
  double tol = 1e-7;
  int max_iter = 50000;
  double relaxation = 1.6;
  double rho = 0.0;          // initial penalty; 0 estimates it from the start point
  bool adaptive_rho = true;
  bool regularize = false;   // add 1e-10 I to the target covariances
  /// Anderson acceleration memory on the ADMM fixed-point map (0 disables).
  int anderson_memory = 10;
  kernels::Backend backend = kernels::Backend::Serial;
};

struct SdpDiagnostics {
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double final_rho = 0.0;
  std::vector<std::string> warnings;
};

/// Linear objective over a list of symmetric blocks, an affine set given by
/// its Frobenius projection, and a PSD constraint on every block:
///
///   minimize sum_b <W_b, X_b>  s.t.  X in affine set,  X_b >= 0.
///
/// Solved by over-relaxed ADMM on the split X (affine) = Y (PSD cone), with
/// safeguarded Anderson extrapolation of the (Y, U) iterates.
struct BlockSdp {
  std::vector<SymMatrix> objective;
  std::function<std::vector<SymMatrix>(const std::vector<SymMatrix>&)> project_affine;
  /// Optional starting point, projected onto the affine set first.
  std::vector<SymMatrix> initial;
};

struct BlockSdpResult {
  std::vector<SymMatrix> x;   // PSD iterate; affine constraints hold to tolerance
  double objective = 0.0;     // sum_b <W_b, x_b>
  SdpDiagnostics diag;
};

/// Throws NotConverged with the final residuals when max_iter is reached.
BlockSdpResult solve_block_sdp(const BlockSdp& problem, const SdpOptions& opts);

/// PSD projection of every block; OpenMP backend projects blocks in parallel.
void project_blocks_psd(std::vector<SymMatrix>& blocks, kernels::Backend backend);

}  // namespace omt
