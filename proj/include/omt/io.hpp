#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "omt/discrete_transport.hpp"
#include "omt/gaussian_tracker.hpp"

namespace omt {

inline constexpr int kFormatVersion = 1;

enum class ObservationMode { Points, Gaussian };

/// Every tunable of both pipelines, with the documented defaults.
struct SolverConfig {
  EpsilonSchedule schedule;
  double tol = 1e-8;
  double stage_tol = 1e-3;
  int max_iter = 20000;
  bool log_domain = true;
  bool openmp = false;
  double merge_tol = 0.0;  // output points closer than this are merged
  GridConfig grid;
  SdpOptions sdp;
  int flow_samples = 101;
};

/// Generating states kept alongside simulated observations.
struct GroundTruth {
  std::vector<std::vector<Vector>> states;  // [particle][time]
  std::vector<std::vector<int>> chains;     // [particle][time] -> point index in that frame
  double sigma = 0.0;
  unsigned long long seed = 0;
};

struct ProblemSpec {
  LinearSystem system;
  std::vector<double> times;
  ObservationMode mode = ObservationMode::Points;
  std::vector<std::vector<Vector>> point_frames;  // points mode
  GaussianSequence gaussian;                      // gaussian mode (times mirrored)
  SolverConfig solver;
  std::optional<GroundTruth> truth;
};

// ---- problem files ----

/// Parses and validates. Throws ParseError (with line/column or field
/// path) or InvalidInput (naming the offending field).
ProblemSpec problem_from_json(const nlohmann::json& j, const SolverConfig& defaults = {});
ProblemSpec parse_problem(const std::string& text, const SolverConfig& defaults = {});
ProblemSpec load_problem(const std::string& path, const SolverConfig& defaults = {});
nlohmann::json problem_to_json(const ProblemSpec& spec);
void save_problem(const ProblemSpec& spec, const std::string& path);

/// Solver defaults from `<dir>/defaults.json` ({"solver": {...}}) when the
/// OMTRACK_CONFIG_DIR environment variable names a directory containing it.
SolverConfig default_solver_config();
void apply_solver_json(const nlohmann::json& j, SolverConfig& cfg);
nlohmann::json solver_to_json(const SolverConfig& cfg);

std::vector<DiscreteMeasure> output_measures(const ProblemSpec& spec);

// ---- results ----

struct CouplingSummary {
  int step = 0;
  Eigen::Index rows = 0, cols = 0;
  Eigen::Index support = 0;  // entries above 1e-12 of the total mass
  double mass = 0.0;
};

struct DiscreteResult {
  double objective = 0.0;
  double raw_objective = 0.0;
  double primal = 0.0;
  double dual = 0.0;
  double gap = 0.0;
  double min_slack = 0.0;
  double final_epsilon = 0.0;
  double marginal_residual = 0.0;
  bool near_integral = false;
  std::vector<StatePath> paths;
  std::vector<FlowEdge> edges;
  std::vector<CouplingSummary> couplings;
};

struct GaussianResult {
  std::vector<Vector> knots;
  double mean_cost = 0.0;
  double objective = 0.0;
  std::vector<SymMatrix> state_cov;
  std::vector<Matrix> cross_cov;
  std::vector<GaussianFlowPoint> flow;
  std::vector<std::string> warnings;
};

struct TrackingResult {
  ObservationMode mode = ObservationMode::Points;
  std::vector<double> times;
  std::optional<DiscreteResult> discrete;
  std::optional<GaussianResult> gaussian;
  int iterations = 0;
  double residual = 0.0;
  double wall_time = 0.0;
  std::optional<std::string> error_class;
  std::optional<std::string> error_message;
};

nlohmann::json result_to_json(const TrackingResult& r);
TrackingResult result_from_json(const nlohmann::json& j);
void save_result(const TrackingResult& r, const std::string& path);

/// Runs the grid + chain solve + certification + extraction pipeline.
TrackingResult track_discrete(const ProblemSpec& spec);
/// Runs the mean spline + covariance SDP + flow sampling pipeline.
TrackingResult track_gaussian(const ProblemSpec& spec);

// ---- plot data ----

struct PlotOptions {
  /// Extra bridge-interpolated rows per interval for discrete paths (0 = knots only).
  int interpolate = 0;
};

/// Tab-separated table: '#' comment header, one column-name line, data rows.
void write_plot_data(const TrackingResult& r, const LinearSystem& sys, std::ostream& os,
                     const PlotOptions& opts = {});
void emit_plot_data(const TrackingResult& r, const LinearSystem& sys, const std::string& path,
                    const PlotOptions& opts = {});

// ---- simulation ----

struct SimulatedEnsemble {
  std::vector<std::vector<Vector>> states;  // [particle][time]
  std::vector<std::vector<Vector>> frames;  // [time][point], shuffled
  std::vector<std::vector<int>> chains;     // [particle][time] -> point index
};

struct SimulationOptions {
  double init_scale = 2.0;   // initial states ~ N(0, init_scale^2 I)
  double substep = 1e-3;     // Euler-Maruyama step when sigma > 0
};

/// Particles following dx = A x dt + sigma dw, observed through C at
/// `times` and shuffled within each frame. Deterministic given `seed`.
SimulatedEnsemble simulate_ensemble(const LinearSystem& sys, const std::vector<double>& times,
                                    int particles, double sigma, unsigned long long seed,
                                    const SimulationOptions& opts = {});

/// Named reference systems: "rotation" (A = [[0,1],[-1,0]], B = I, C = [1 0])
/// and "double-integrator" (A = [[0,I],[0,0]], B = [0;I], C = [I 0]) of size `dim`.
LinearSystem reference_system(const std::string& name, int dim = 1);

}  // namespace omt
