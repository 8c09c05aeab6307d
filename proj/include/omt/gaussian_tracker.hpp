#pragma once

#include <vector>

#include "omt/dynamics.hpp"
#include "omt/sdp_splitting.hpp"

namespace omt {

/// Gaussian output snapshots (mu_k, Sigma_k) at strictly increasing times.
struct GaussianSequence {
  std::vector<double> times;
  std::vector<Vector> means;
  std::vector<SymMatrix> covariances;

  /// Checks lengths, dimensions against `output_dim`, ordering, and PSD-ness.
  void validate(Eigen::Index output_dim) const;
};

struct MeanSpline {
  std::vector<double> times;
  std::vector<Vector> knots;  // x(t_k)
  double cost = 0.0;          // minimal control energy
};

/// Minimum-energy state path through the given output means.
MeanSpline mean_spline(const LinearSystem& sys, const std::vector<double>& times,
                       const std::vector<Vector>& means);

struct StateCovariancePlan {
  std::vector<SymMatrix> state_cov;  // Sigma-hat_k, one per time
  std::vector<Matrix> cross_cov;     // S_{k,k+1} = E[x_k x_{k+1}^T], one per interval
  /// PSD joint covariance of (x_k, x_{k+1}) per interval as solved. Shared
  /// diagonal blocks agree with state_cov to solver tolerance. When empty the
  /// flow assembles joints from state_cov and cross_cov.
  std::vector<SymMatrix> blocks;
};

struct CovarianceSolution {
  StateCovariancePlan plan;
  double objective = 0.0;
  SdpDiagnostics diag;
};

/// Lifted covariance interpolation: one PSD block per interval coupling
/// consecutive state covariances, each constrained to C Sigma-hat_k C^T = Sigma_k.
CovarianceSolution covariance_sdp(const LinearSystem& sys, const std::vector<double>& times,
                                  const std::vector<SymMatrix>& covariances,
                                  const SdpOptions& opts = {});

/// Quadratic form of the cheapest lift over fixed outputs: c_y(y) = y^T R y
/// for stacked y = (y_0, ..., y_T).
struct OutputCostForm {
  SymMatrix r;
  Eigen::Index output_dim = 0;
  size_t knots = 0;
};

OutputCostForm output_cost_matrix(const LinearSystem& sys, const std::vector<double>& times);

struct JointCovarianceSolution {
  SymMatrix joint;  // Sigma_y over all stacked outputs
  double objective = 0.0;
  SdpDiagnostics diag;
};

/// Joint-output formulation: minimize tr(R Sigma_y) over Sigma_y >= 0 with
/// fixed diagonal blocks. Size grows with the number of knots, so this is
/// meant as a cross-check on small problems.
JointCovarianceSolution covariance_sdp_joint(const OutputCostForm& form,
                                             const std::vector<SymMatrix>& covariances,
                                             const SdpOptions& opts = {});

struct GaussianFlowPoint {
  double t = 0.0;
  Vector mean;          // output mean
  SymMatrix cov;        // output covariance
  Vector state_mean;
  SymMatrix state_cov;
};

/// Continuous-time Gaussian flow between knots using the minimum-energy bridge.
GaussianFlowPoint gaussian_flow(const LinearSystem& sys, const MeanSpline& spline,
                                const StateCovariancePlan& plan, double t);

}  // namespace omt
