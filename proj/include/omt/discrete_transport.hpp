#pragma once

#include <optional>
#include <random>
#include <vector>

#include "omt/chain_kernels.hpp"
#include "omt/dynamics.hpp"

namespace omt {

/// Weighted point measure in output space.
struct DiscreteMeasure {
  std::vector<Vector> support;
  Vector weights;

  double total_mass() const { return weights.sum(); }
  /// Unit weight per point; points closer than `merge_tol` (max-norm) are merged.
  static DiscreteMeasure from_points(const std::vector<Vector>& points, double merge_tol = 0.0);
};

struct GridConfig {
  double lower = -7.0;
  double upper = 7.0;
  int points_per_dim = 150;
  /// Columns span the unobserved directions when C is not a coordinate selection.
  std::optional<Matrix> complement_basis;
  double snap_tol = 1e-9;
};

/// Candidate states at one time: every point of the output support lifted
/// with a uniform grid over the unobserved directions.
struct StateGrid {
  Matrix points;              // n x size(), one state per column
  std::vector<int> bin;       // output-support index of each point, -1 if unmatched
  int num_bins = 0;

  Eigen::Index size() const { return points.cols(); }
};

std::vector<double> linspace(double lower, double upper, int count);

std::vector<StateGrid> build_state_grids(const std::vector<DiscreteMeasure>& outputs,
                                         const LinearSystem& sys, const GridConfig& cfg);

/// Pairwise step costs between consecutive grids, stored both ways round so
/// forward and backward contractions read contiguous columns.
class ChainCosts {
 public:
  ChainCosts(const std::vector<StepKernel>& kernels, const std::vector<StateGrid>& grids);

  size_t steps() const { return forward_.size(); }
  /// (|grid_k| x |grid_{k+1}|)
  const Matrix& forward(size_t k) const { return forward_[k]; }
  /// (|grid_{k+1}| x |grid_k|)
  const Matrix& backward(size_t k) const { return backward_[k]; }

 private:
  std::vector<Matrix> forward_;
  std::vector<Matrix> backward_;
};

struct EpsilonSchedule {
  double start = 1.0;
  double stop = 1e-3;
  double factor = 0.5;

  /// start, start*factor, ... while above stop, then stop itself.
  std::vector<double> stages() const;
};

enum class ScalingDomain { Log, Plain };

struct ChainSolverOptions {
  EpsilonSchedule schedule;
  double tol = 1e-8;          // L1 marginal residual at the last stage
  double stage_tol = 1e-3;    // residual for intermediate stages (warm starts only)
  int max_iter = 20000;       // sweeps per stage
  kernels::Backend backend = kernels::Backend::Serial;
  ScalingDomain domain = ScalingDomain::Log;
  /// Sweeps between Newton steps on the per-bin dual (0 disables them).
  /// Plain scaling slows to a crawl when the optimal plan is nearly sparse;
  /// the bin-level dual is small enough to solve directly.
  int newton_every = 10;
  /// Replace the entropic potentials by exact block-coordinate maxima of
  /// the unregularized dual (min-plus messages) after the last stage.
  bool refine_dual = true;
  int refine_rounds = 4;
};

struct CouplingChain {
  std::vector<Matrix> couplings;        // pi_k, |grid_k| x |grid_{k+1}|
  std::vector<Vector> state_marginals;  // per time, over grid points
};

struct DualPotentials {
  std::vector<Vector> phi;  // per time, one value per output-support point
};

struct ChainSolution {
  CouplingChain chain;
  DualPotentials potentials;
  double objective = 0.0;       // sum_k <c, pi_k> at unit mass
  double raw_objective = 0.0;   // scaled back to the input mass
  double mass = 1.0;            // common input mass
  double final_epsilon = 0.0;
  int iterations = 0;           // total sweeps across stages
  double marginal_residual = 0.0;
};

/// Entropic, epsilon-annealed solve of the chain multimarginal transport
/// problem with output-pushforward constraints.
ChainSolution solve_chain(const std::vector<StepKernel>& kernels,
                          const std::vector<DiscreteMeasure>& outputs,
                          const std::vector<StateGrid>& grids,
                          const ChainSolverOptions& opts = {});

/// Same, reusing precomputed costs.
ChainSolution solve_chain(const ChainCosts& costs, const std::vector<DiscreteMeasure>& outputs,
                          const std::vector<StateGrid>& grids,
                          const ChainSolverOptions& opts = {});

/// Exact best-response potentials: each phi_k is replaced by the largest
/// values keeping sum_k phi_k(C x_k) <= sum_k c(x_k, x_{k+1}) over all grid tuples.
DualPotentials refine_potentials(const ChainCosts& costs, const std::vector<StateGrid>& grids,
                                 const std::vector<DiscreteMeasure>& outputs,
                                 DualPotentials potentials, int rounds,
                                 kernels::Backend backend = kernels::Backend::Serial);

struct DualityReport {
  double primal = 0.0;
  double dual = 0.0;
  double gap = 0.0;
  /// min over all grid tuples of sum c - sum phi (>= 0 when feasible)
  double min_slack = 0.0;
  std::vector<int> tightest_tuple;  // grid indices achieving min_slack
};

/// Primal and dual objectives (unit mass) and their gap. Dual feasibility is
/// verified over every grid tuple with a min-plus pass along the chain;
/// throws Infeasible, naming the worst tuple, if it fails by more than
/// `feas_tol * max(1, primal)`.
DualityReport duality_gap(const CouplingChain& chain, const DualPotentials& potentials,
                          const std::vector<DiscreteMeasure>& outputs, const ChainCosts& costs,
                          const std::vector<StateGrid>& grids, double feas_tol = 1e-9);

/// Exhaustive association oracle for small point ensembles.
struct Assignment {
  /// chains[i][k] = index of particle i's point in frame k (chains[i][0] == i)
  std::vector<std::vector<int>> chains;
  double cost = 0.0;
  double runner_up_cost = 0.0;  // best cost of any different association (+inf if none)
  std::vector<std::vector<Vector>> states;  // lifted states per particle and knot
};

Assignment brute_force_assignment(const std::vector<std::vector<Vector>>& frames,
                                  const std::vector<StepKernel>& kernels, const Matrix& c);

// ---- trajectories ----

struct StatePath {
  std::vector<int> bins;          // output-support index per time
  std::vector<int> grid_index;    // heaviest grid path in this group
  std::vector<Vector> states;     // mass-weighted mean state per time
  double mass = 0.0;
};

struct FlowEdge {
  int step = 0;
  int from = 0;
  int to = 0;
  double mass = 0.0;
};

struct TrajectoryExtraction {
  bool near_integral = false;
  std::vector<StatePath> paths;   // filled when near_integral
  std::vector<FlowEdge> edges;    // filled otherwise
};

/// Greedy bottleneck path decomposition of the chain. Grid paths sharing the
/// same output-bin sequence are merged into one estimate. Falls back to a
/// weighted edge list when the chain is not close to a permutation structure.
TrajectoryExtraction extract_trajectories(const CouplingChain& chain,
                                          const std::vector<StateGrid>& grids,
                                          const ChainCosts& costs);

/// Joint measure over all times built from consistent pairwise couplings by
/// chaining Markov transitions.
class GluedChain {
 public:
  explicit GluedChain(CouplingChain chain, double tol = 1e-8);

  size_t times() const { return chain_.state_marginals.size(); }
  /// Marginal of the glued joint on times (i, j), i < j.
  Matrix pair_marginal(size_t i, size_t j) const;
  /// Full-tuple probability (normalized by total mass).
  double tuple_probability(const std::vector<int>& tuple) const;
  /// Exact sample of a full tuple of grid indices.
  std::vector<int> sample(std::mt19937_64& rng) const;

 private:
  CouplingChain chain_;
  double mass_ = 0.0;
};

GluedChain glue_chain(const CouplingChain& chain);

}  // namespace omt
