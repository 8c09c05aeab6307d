#include "omt/io.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "omt/error.hpp"

namespace omt {

using nlohmann::json;

namespace {

std::string field_error(const std::string& path, const std::string& what) {
  return "field '" + path + "': " + what;
}

const json& require(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key))
    throw ParseError(field_error(path.empty() ? key : path + "." + key, "missing"));
  return j.at(key);
}

double read_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ParseError(field_error(path, "expected a number"));
  return j.get<double>();
}

Vector read_vector(const json& j, const std::string& path) {
  if (!j.is_array()) throw ParseError(field_error(path, "expected an array of numbers"));
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (size_t i = 0; i < j.size(); ++i)
    v(static_cast<Eigen::Index>(i)) = read_number(j[i], path + "[" + std::to_string(i) + "]");
  return v;
}

// Row-major array of rows.
Matrix read_matrix(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty())
    throw ParseError(field_error(path, "expected a non-empty array of rows"));
  const size_t rows = j.size();
  if (!j[0].is_array()) throw ParseError(field_error(path, "expected an array of rows"));
  const size_t cols = j[0].size();
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (size_t r = 0; r < rows; ++r) {
    const std::string rp = path + "[" + std::to_string(r) + "]";
    if (!j[r].is_array() || j[r].size() != cols)
      throw ParseError(field_error(rp, "row length differs from row 0 (" + std::to_string(cols) + ")"));
    for (size_t c = 0; c < cols; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          read_number(j[r][c], rp + "[" + std::to_string(c) + "]");
  }
  return m;
}

json write_vector(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json write_matrix(const Matrix& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

std::string mode_name(ObservationMode m) { return m == ObservationMode::Points ? "points" : "gaussian"; }

ObservationMode parse_mode(const json& j, const std::string& path) {
  if (!j.is_string()) throw ParseError(field_error(path, "expected \"points\" or \"gaussian\""));
  const auto s = j.get<std::string>();
  if (s == "points") return ObservationMode::Points;
  if (s == "gaussian") return ObservationMode::Gaussian;
  throw ParseError(field_error(path, "unknown mode \"" + s + "\""));
}

std::pair<size_t, size_t> line_col(const std::string& text, size_t byte) {
  size_t line = 1, col = 1;
  for (size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    std::ostringstream os;
    os << "JSON syntax error at line " << line << ", column " << col << ": " << e.what();
    throw ParseError(os.str());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

void check_version(const json& j, const std::string& what) {
  const json& v = require(j, "format_version", "");
  if (!v.is_number_integer()) throw ParseError(field_error("format_version", "expected an integer"));
  if (v.get<int>() != kFormatVersion) {
    std::ostringstream os;
    os << what << " format_version " << v.get<int>() << " is not supported (expected "
       << kFormatVersion << ")";
    throw ParseError(os.str());
  }
}

}  // namespace

// ---- solver config ----

void apply_solver_json(const json& j, SolverConfig& cfg) {
  if (!j.is_object()) throw ParseError(field_error("solver", "expected an object"));
  auto num = [&](const json& o, const char* key, const std::string& path, auto& dst) {
    if (o.contains(key)) dst = static_cast<std::decay_t<decltype(dst)>>(read_number(o.at(key), path + "." + key));
  };
  auto flag = [&](const json& o, const char* key, const std::string& path, bool& dst) {
    if (!o.contains(key)) return;
    if (!o.at(key).is_boolean()) throw ParseError(field_error(path + "." + key, "expected true/false"));
    dst = o.at(key).get<bool>();
  };
  if (j.contains("epsilon_schedule")) {
    const json& e = j.at("epsilon_schedule");
    if (!e.is_object()) throw ParseError(field_error("solver.epsilon_schedule", "expected an object"));
    num(e, "start", "solver.epsilon_schedule", cfg.schedule.start);
    num(e, "stop", "solver.epsilon_schedule", cfg.schedule.stop);
    num(e, "factor", "solver.epsilon_schedule", cfg.schedule.factor);
  }
  num(j, "tol", "solver", cfg.tol);
  num(j, "stage_tol", "solver", cfg.stage_tol);
  num(j, "max_iter", "solver", cfg.max_iter);
  num(j, "merge_tol", "solver", cfg.merge_tol);
  num(j, "flow_samples", "solver", cfg.flow_samples);
  flag(j, "log_domain", "solver", cfg.log_domain);
  flag(j, "openmp", "solver", cfg.openmp);
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    if (!g.is_object()) throw ParseError(field_error("solver.grid", "expected an object"));
    if (g.contains("bounds")) {
      const Vector b = read_vector(g.at("bounds"), "solver.grid.bounds");
      if (b.size() != 2) throw ParseError(field_error("solver.grid.bounds", "expected [lower, upper]"));
      cfg.grid.lower = b(0);
      cfg.grid.upper = b(1);
    }
    num(g, "points", "solver.grid", cfg.grid.points_per_dim);
    num(g, "snap_tol", "solver.grid", cfg.grid.snap_tol);
    if (g.contains("complement_basis") && !g.at("complement_basis").is_null())
      cfg.grid.complement_basis = read_matrix(g.at("complement_basis"), "solver.grid.complement_basis");
  }
  if (j.contains("sdp")) {
    const json& s = j.at("sdp");
    if (!s.is_object()) throw ParseError(field_error("solver.sdp", "expected an object"));
    num(s, "tol", "solver.sdp", cfg.sdp.tol);
    num(s, "max_iter", "solver.sdp", cfg.sdp.max_iter);
    num(s, "relaxation", "solver.sdp", cfg.sdp.relaxation);
    num(s, "rho", "solver.sdp", cfg.sdp.rho);
    num(s, "anderson_memory", "solver.sdp", cfg.sdp.anderson_memory);
    flag(s, "adaptive_rho", "solver.sdp", cfg.sdp.adaptive_rho);
    flag(s, "regularize", "solver.sdp", cfg.sdp.regularize);
  }
}

json solver_to_json(const SolverConfig& cfg) {
  json grid = {{"bounds", {cfg.grid.lower, cfg.grid.upper}},
               {"points", cfg.grid.points_per_dim},
               {"snap_tol", cfg.grid.snap_tol}};
  if (cfg.grid.complement_basis) grid["complement_basis"] = write_matrix(*cfg.grid.complement_basis);
  return {{"epsilon_schedule",
           {{"start", cfg.schedule.start}, {"stop", cfg.schedule.stop}, {"factor", cfg.schedule.factor}}},
          {"tol", cfg.tol},
          {"stage_tol", cfg.stage_tol},
          {"max_iter", cfg.max_iter},
          {"log_domain", cfg.log_domain},
          {"openmp", cfg.openmp},
          {"merge_tol", cfg.merge_tol},
          {"flow_samples", cfg.flow_samples},
          {"grid", grid},
          {"sdp",
           {{"tol", cfg.sdp.tol},
            {"max_iter", cfg.sdp.max_iter},
            {"relaxation", cfg.sdp.relaxation},
            {"rho", cfg.sdp.rho},
            {"anderson_memory", cfg.sdp.anderson_memory},
            {"adaptive_rho", cfg.sdp.adaptive_rho},
            {"regularize", cfg.sdp.regularize}}}};
}

SolverConfig default_solver_config() {
  SolverConfig cfg;
  const char* dir = std::getenv("OMTRACK_CONFIG_DIR");
  if (dir == nullptr || *dir == '\0') return cfg;
  const std::filesystem::path file = std::filesystem::path(dir) / "defaults.json";
  if (!std::filesystem::exists(file)) return cfg;
  const json j = parse_text(read_file(file.string()));
  if (j.contains("solver")) apply_solver_json(j.at("solver"), cfg);
  return cfg;
}

// ---- problems ----

ProblemSpec problem_from_json(const json& j, const SolverConfig& defaults) {
  if (!j.is_object()) throw ParseError("problem file must hold a JSON object");
  check_version(j, "problem");
  const json& sys = require(j, "system", "");
  Matrix a = read_matrix(require(sys, "A", "system"), "system.A");
  Matrix b = read_matrix(require(sys, "B", "system"), "system.B");
  Matrix c = read_matrix(require(sys, "C", "system"), "system.C");
  if (a.rows() != a.cols())
    throw InvalidInput(field_error("system.A", "must be square"));
  if (b.rows() != a.rows())
    throw InvalidInput(field_error("system.B", "must have " + std::to_string(a.rows()) + " rows"));
  if (c.cols() != a.rows())
    throw InvalidInput(field_error("system.C", "must have " + std::to_string(a.rows()) + " columns"));
  std::optional<LinearSystem> system;
  try {
    system.emplace(std::move(a), std::move(b), std::move(c));
  } catch (const InvalidInput& e) {
    throw InvalidInput(field_error("system", e.what()));
  }
  const auto n = system->state_dim(), m = system->output_dim();

  ProblemSpec spec{*system, {}, ObservationMode::Points, {}, {}, defaults, std::nullopt};
  const Vector times = read_vector(require(j, "times", ""), "times");
  spec.times.assign(times.data(), times.data() + times.size());
  if (spec.times.size() < 2) throw InvalidInput(field_error("times", "need at least two times"));
  for (size_t k = 0; k + 1 < spec.times.size(); ++k)
    if (!(spec.times[k + 1] > spec.times[k]))
      throw InvalidInput(field_error("times", "must be strictly increasing (index " +
                                                  std::to_string(k + 1) + ")"));

  const json& obs = require(j, "observations", "");
  spec.mode = parse_mode(require(obs, "mode", "observations"), "observations.mode");
  const json& frames = require(obs, "frames", "observations");
  if (!frames.is_array()) throw ParseError(field_error("observations.frames", "expected an array"));
  if (frames.empty()) throw InvalidInput(field_error("observations.frames", "is empty"));
  if (frames.size() != spec.times.size())
    throw InvalidInput(field_error("observations.frames", "has " + std::to_string(frames.size()) +
                                                              " frames for " +
                                                              std::to_string(spec.times.size()) + " times"));
  for (size_t k = 0; k < frames.size(); ++k) {
    const std::string fp = "observations.frames[" + std::to_string(k) + "]";
    if (spec.mode == ObservationMode::Points) {
      if (!frames[k].is_array() || frames[k].empty())
        throw InvalidInput(field_error(fp, "expected a non-empty array of points"));
      std::vector<Vector> pts;
      for (size_t i = 0; i < frames[k].size(); ++i) {
        const std::string pp = fp + "[" + std::to_string(i) + "]";
        Vector y = read_vector(frames[k][i], pp);
        if (y.size() != m)
          throw InvalidInput(field_error(pp, "has dimension " + std::to_string(y.size()) +
                                                 ", expected " + std::to_string(m)));
        pts.push_back(std::move(y));
      }
      spec.point_frames.push_back(std::move(pts));
    } else {
      if (!frames[k].is_object()) throw ParseError(field_error(fp, "expected {\"mean\", \"cov\"}"));
      Vector mu = read_vector(require(frames[k], "mean", fp), fp + ".mean");
      if (mu.size() != m)
        throw InvalidInput(field_error(fp + ".mean", "has dimension " + std::to_string(mu.size()) +
                                                         ", expected " + std::to_string(m)));
      const Matrix cov = read_matrix(require(frames[k], "cov", fp), fp + ".cov");
      if (cov.rows() != m || cov.cols() != m)
        throw InvalidInput(field_error(fp + ".cov", "must be " + std::to_string(m) + "x" + std::to_string(m)));
      SymMatrix s;
      try {
        s = SymMatrix::from(cov);
      } catch (const InvalidInput& e) {
        throw InvalidInput(field_error(fp + ".cov", e.what()));
      }
      if (min_eigenvalue(s) < -1e-10 * std::max(1.0, cov.norm()))
        throw InvalidInput(field_error(fp + ".cov", "frame " + std::to_string(k) +
                                                        " covariance is not positive semidefinite"));
      spec.gaussian.means.push_back(std::move(mu));
      spec.gaussian.covariances.push_back(std::move(s));
    }
  }
  if (spec.mode == ObservationMode::Gaussian) spec.gaussian.times = spec.times;

  if (j.contains("solver")) apply_solver_json(j.at("solver"), spec.solver);
  if (spec.solver.grid.complement_basis && spec.solver.grid.complement_basis->rows() != n)
    throw InvalidInput(field_error("solver.grid.complement_basis", "must have one row per state"));

  if (j.contains("truth") && !j.at("truth").is_null()) {
    const json& t = j.at("truth");
    GroundTruth truth;
    const json& states = require(t, "states", "truth");
    const json& chains = require(t, "chains", "truth");
    if (!states.is_array() || !chains.is_array() || states.size() != chains.size())
      throw ParseError(field_error("truth", "states and chains must be arrays of equal length"));
    for (size_t i = 0; i < states.size(); ++i) {
      std::vector<Vector> path;
      const std::string sp = "truth.states[" + std::to_string(i) + "]";
      if (!states[i].is_array() || states[i].size() != spec.times.size())
        throw InvalidInput(field_error(sp, "needs one state per time"));
      for (size_t k = 0; k < states[i].size(); ++k) {
        Vector x = read_vector(states[i][k], sp + "[" + std::to_string(k) + "]");
        if (x.size() != n) throw InvalidInput(field_error(sp, "state dimension mismatch"));
        path.push_back(std::move(x));
      }
      truth.states.push_back(std::move(path));
      const Vector ch = read_vector(chains[i], "truth.chains[" + std::to_string(i) + "]");
      truth.chains.emplace_back();
      for (Eigen::Index k = 0; k < ch.size(); ++k) truth.chains.back().push_back(static_cast<int>(ch(k)));
    }
    if (t.contains("sigma")) truth.sigma = read_number(t.at("sigma"), "truth.sigma");
    if (t.contains("seed")) truth.seed = t.at("seed").get<unsigned long long>();
    spec.truth = std::move(truth);
  }
  return spec;
}

ProblemSpec parse_problem(const std::string& text, const SolverConfig& defaults) {
  return problem_from_json(parse_text(text), defaults);
}

ProblemSpec load_problem(const std::string& path, const SolverConfig& defaults) {
  return parse_problem(read_file(path), defaults);
}

json problem_to_json(const ProblemSpec& spec) {
  json frames = json::array();
  if (spec.mode == ObservationMode::Points) {
    for (const auto& f : spec.point_frames) {
      json pts = json::array();
      for (const Vector& y : f) pts.push_back(write_vector(y));
      frames.push_back(std::move(pts));
    }
  } else {
    for (size_t k = 0; k < spec.gaussian.means.size(); ++k)
      frames.push_back({{"mean", write_vector(spec.gaussian.means[k])},
                        {"cov", write_matrix(spec.gaussian.covariances[k].matrix())}});
  }
  json j = {{"format_version", kFormatVersion},
            {"system",
             {{"A", write_matrix(spec.system.a())},
              {"B", write_matrix(spec.system.b())},
              {"C", write_matrix(spec.system.c())}}},
            {"times", spec.times},
            {"observations", {{"mode", mode_name(spec.mode)}, {"frames", frames}}},
            {"solver", solver_to_json(spec.solver)}};
  if (spec.truth) {
    json states = json::array();
    for (const auto& path : spec.truth->states) {
      json p = json::array();
      for (const Vector& x : path) p.push_back(write_vector(x));
      states.push_back(std::move(p));
    }
    j["truth"] = {{"states", states},
                  {"chains", spec.truth->chains},
                  {"sigma", spec.truth->sigma},
                  {"seed", spec.truth->seed}};
  }
  return j;
}

void save_problem(const ProblemSpec& spec, const std::string& path) {
  write_file(path, problem_to_json(spec).dump(2) + "\n");
}

std::vector<DiscreteMeasure> output_measures(const ProblemSpec& spec) {
  std::vector<DiscreteMeasure> out;
  for (const auto& f : spec.point_frames)
    out.push_back(DiscreteMeasure::from_points(f, spec.solver.merge_tol));
  return out;
}

// ---- results ----

json result_to_json(const TrackingResult& r) {
  json j = {{"format_version", kFormatVersion},
            {"mode", mode_name(r.mode)},
            {"times", r.times},
            {"diagnostics",
             {{"iterations", r.iterations}, {"residual", r.residual}, {"wall_time_seconds", r.wall_time}}}};
  if (r.discrete) {
    const DiscreteResult& d = *r.discrete;
    json paths = json::array();
    for (const StatePath& p : d.paths) {
      json states = json::array();
      for (const Vector& x : p.states) states.push_back(write_vector(x));
      paths.push_back({{"mass", p.mass}, {"bins", p.bins}, {"grid_index", p.grid_index}, {"states", states}});
    }
    json edges = json::array();
    for (const FlowEdge& e : d.edges) edges.push_back({e.step, e.from, e.to, e.mass});
    json couplings = json::array();
    for (const CouplingSummary& c : d.couplings)
      couplings.push_back({{"step", c.step}, {"rows", c.rows}, {"cols", c.cols}, {"support", c.support}, {"mass", c.mass}});
    j["discrete"] = {{"objective", d.objective},
                     {"raw_objective", d.raw_objective},
                     {"primal", d.primal},
                     {"dual", d.dual},
                     {"gap", d.gap},
                     {"min_slack", d.min_slack},
                     {"final_epsilon", d.final_epsilon},
                     {"marginal_residual", d.marginal_residual},
                     {"near_integral", d.near_integral},
                     {"paths", paths},
                     {"edges", edges},
                     {"couplings", couplings}};
  }
  if (r.gaussian) {
    const GaussianResult& g = *r.gaussian;
    json knots = json::array(), sc = json::array(), cc = json::array(), flow = json::array();
    for (const Vector& x : g.knots) knots.push_back(write_vector(x));
    for (const SymMatrix& s : g.state_cov) sc.push_back(write_matrix(s.matrix()));
    for (const Matrix& s : g.cross_cov) cc.push_back(write_matrix(s));
    for (const GaussianFlowPoint& p : g.flow)
      flow.push_back({{"t", p.t},
                      {"mean", write_vector(p.mean)},
                      {"cov", write_matrix(p.cov.matrix())},
                      {"state_mean", write_vector(p.state_mean)},
                      {"state_cov", write_matrix(p.state_cov.matrix())}});
    j["gaussian"] = {{"objective", g.objective},
                     {"mean_cost", g.mean_cost},
                     {"knots", knots},
                     {"state_covariances", sc},
                     {"cross_covariances", cc},
                     {"flow", flow},
                     {"warnings", g.warnings}};
  }
  if (r.error_class)
    j["error"] = {{"class", *r.error_class}, {"message", r.error_message.value_or("")}};
  return j;
}

TrackingResult result_from_json(const json& j) {
  check_version(j, "result");
  TrackingResult r;
  r.mode = parse_mode(require(j, "mode", ""), "mode");
  const Vector t = read_vector(require(j, "times", ""), "times");
  r.times.assign(t.data(), t.data() + t.size());
  const json& diag = require(j, "diagnostics", "");
  r.iterations = require(diag, "iterations", "diagnostics").get<int>();
  r.residual = read_number(require(diag, "residual", "diagnostics"), "diagnostics.residual");
  r.wall_time = read_number(require(diag, "wall_time_seconds", "diagnostics"), "diagnostics.wall_time_seconds");
  if (j.contains("discrete")) {
    const json& d = j.at("discrete");
    DiscreteResult out;
    out.objective = d.at("objective").get<double>();
    out.raw_objective = d.at("raw_objective").get<double>();
    out.primal = d.at("primal").get<double>();
    out.dual = d.at("dual").get<double>();
    out.gap = d.at("gap").get<double>();
    out.min_slack = d.at("min_slack").get<double>();
    out.final_epsilon = d.at("final_epsilon").get<double>();
    out.marginal_residual = d.at("marginal_residual").get<double>();
    out.near_integral = d.at("near_integral").get<bool>();
    for (const json& p : d.at("paths")) {
      StatePath sp;
      sp.mass = p.at("mass").get<double>();
      sp.bins = p.at("bins").get<std::vector<int>>();
      sp.grid_index = p.at("grid_index").get<std::vector<int>>();
      for (const json& x : p.at("states")) sp.states.push_back(read_vector(x, "discrete.paths.states"));
      out.paths.push_back(std::move(sp));
    }
    for (const json& e : d.at("edges"))
      out.edges.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<int>(), e[3].get<double>()});
    for (const json& c : d.at("couplings"))
      out.couplings.push_back({c.at("step").get<int>(), c.at("rows").get<Eigen::Index>(),
                               c.at("cols").get<Eigen::Index>(), c.at("support").get<Eigen::Index>(),
                               c.at("mass").get<double>()});
    r.discrete = std::move(out);
  }
  if (j.contains("gaussian")) {
    const json& g = j.at("gaussian");
    GaussianResult out;
    out.objective = g.at("objective").get<double>();
    out.mean_cost = g.at("mean_cost").get<double>();
    for (const json& x : g.at("knots")) out.knots.push_back(read_vector(x, "gaussian.knots"));
    for (const json& s : g.at("state_covariances"))
      out.state_cov.push_back(SymMatrix::from(read_matrix(s, "gaussian.state_covariances")));
    for (const json& s : g.at("cross_covariances"))
      out.cross_cov.push_back(read_matrix(s, "gaussian.cross_covariances"));
    for (const json& p : g.at("flow")) {
      GaussianFlowPoint fp;
      fp.t = p.at("t").get<double>();
      fp.mean = read_vector(p.at("mean"), "gaussian.flow.mean");
      fp.cov = SymMatrix::from(read_matrix(p.at("cov"), "gaussian.flow.cov"));
      fp.state_mean = read_vector(p.at("state_mean"), "gaussian.flow.state_mean");
      fp.state_cov = SymMatrix::from(read_matrix(p.at("state_cov"), "gaussian.flow.state_cov"));
      out.flow.push_back(std::move(fp));
    }
    out.warnings = g.at("warnings").get<std::vector<std::string>>();
    r.gaussian = std::move(out);
  }
  if (j.contains("error")) {
    r.error_class = j.at("error").at("class").get<std::string>();
    r.error_message = j.at("error").at("message").get<std::string>();
  }
  return r;
}

void save_result(const TrackingResult& r, const std::string& path) {
  write_file(path, result_to_json(r).dump(2) + "\n");
}

// ---- pipelines ----

TrackingResult track_discrete(const ProblemSpec& spec) {
  if (spec.mode != ObservationMode::Points)
    throw InvalidInput("track-discrete needs point observations (observations.mode = \"points\")");
  const auto start = std::chrono::steady_clock::now();
  TrackingResult r;
  r.mode = ObservationMode::Points;
  r.times = spec.times;

  const auto outputs = output_measures(spec);
  const auto kernels = make_kernels(spec.system, spec.times);
  const auto grids = build_state_grids(outputs, spec.system, spec.solver.grid);
  const ChainCosts costs(kernels, grids);

  ChainSolverOptions opts;
  opts.schedule = spec.solver.schedule;
  opts.tol = spec.solver.tol;
  opts.stage_tol = spec.solver.stage_tol;
  opts.max_iter = spec.solver.max_iter;
  opts.domain = spec.solver.log_domain ? ScalingDomain::Log : ScalingDomain::Plain;
  opts.backend = spec.solver.openmp ? kernels::Backend::OpenMP : kernels::Backend::Serial;
  const ChainSolution sol = solve_chain(costs, outputs, grids, opts);
  const DualityReport rep = duality_gap(sol.chain, sol.potentials, outputs, costs, grids);
  const TrajectoryExtraction ex = extract_trajectories(sol.chain, grids, costs);

  DiscreteResult d;
  d.objective = sol.objective;
  d.raw_objective = sol.raw_objective;
  d.primal = rep.primal;
  d.dual = rep.dual;
  d.gap = rep.gap;
  d.min_slack = rep.min_slack;
  d.final_epsilon = sol.final_epsilon;
  d.marginal_residual = sol.marginal_residual;
  d.near_integral = ex.near_integral;
  d.paths = ex.paths;
  d.edges = ex.edges;
  const double mass = sol.chain.state_marginals.front().sum();
  for (size_t k = 0; k < sol.chain.couplings.size(); ++k) {
    const Matrix& pi = sol.chain.couplings[k];
    d.couplings.push_back({static_cast<int>(k), pi.rows(), pi.cols(),
                           (pi.array() > 1e-12 * mass).count(), pi.sum()});
  }
  r.discrete = std::move(d);
  r.iterations = sol.iterations;
  r.residual = sol.marginal_residual;
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

TrackingResult track_gaussian(const ProblemSpec& spec) {
  if (spec.mode != ObservationMode::Gaussian)
    throw InvalidInput("track-gaussian needs Gaussian observations (observations.mode = \"gaussian\")");
  const auto start = std::chrono::steady_clock::now();
  spec.gaussian.validate(spec.system.output_dim());
  TrackingResult r;
  r.mode = ObservationMode::Gaussian;
  r.times = spec.times;

  const MeanSpline spline = mean_spline(spec.system, spec.times, spec.gaussian.means);
  SdpOptions sdp = spec.solver.sdp;
  if (spec.solver.openmp) sdp.backend = kernels::Backend::OpenMP;
  const CovarianceSolution cov = covariance_sdp(spec.system, spec.times, spec.gaussian.covariances, sdp);

  GaussianResult g;
  g.knots = spline.knots;
  g.mean_cost = spline.cost;
  g.objective = cov.objective;
  g.state_cov = cov.plan.state_cov;
  g.cross_cov = cov.plan.cross_cov;
  g.warnings = cov.diag.warnings;
  const int samples = spec.solver.flow_samples;
  for (int i = 0; i < samples; ++i) {
    const double t = samples == 1 ? spec.times.front()
                                  : spec.times.front() + (spec.times.back() - spec.times.front()) *
                                                             static_cast<double>(i) / (samples - 1);
    g.flow.push_back(gaussian_flow(spec.system, spline, cov.plan, std::min(t, spec.times.back())));
  }
  r.gaussian = std::move(g);
  r.iterations = cov.diag.iterations;
  r.residual = std::max(cov.diag.primal_residual, cov.diag.dual_residual);
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---- plot data ----

void write_plot_data(const TrackingResult& r, const LinearSystem& sys, std::ostream& os,
                     const PlotOptions& opts) {
  os << std::setprecision(12);
  os << "# omtrack plot data, format_version " << kFormatVersion << ", mode " << mode_name(r.mode) << "\n";
  const auto n = sys.state_dim(), m = sys.output_dim();
  if (r.discrete && r.discrete->near_integral) {
    os << "t\tentity\tmass";
    for (Eigen::Index i = 0; i < n; ++i) os << "\tx" << i;
    os << "\n";
    for (size_t p = 0; p < r.discrete->paths.size(); ++p) {
      const StatePath& path = r.discrete->paths[p];
      for (size_t k = 0; k < path.states.size(); ++k) {
        os << r.times[k] << "\t" << p << "\t" << path.mass;
        for (Eigen::Index i = 0; i < n; ++i) os << "\t" << path.states[k](i);
        os << "\n";
        if (opts.interpolate > 0 && k + 1 < path.states.size()) {
          const double dt = r.times[k + 1] - r.times[k];
          for (int s = 1; s <= opts.interpolate; ++s) {
            const double frac = static_cast<double>(s) / (opts.interpolate + 1);
            const BridgePair br = bridge(sys, frac, dt);
            const Vector x = br.g * path.states[k] + br.h * path.states[k + 1];
            os << r.times[k] + frac * dt << "\t" << p << "\t" << path.mass;
            for (Eigen::Index i = 0; i < n; ++i) os << "\t" << x(i);
            os << "\n";
          }
        }
      }
    }
  } else if (r.discrete) {
    os << "step\tfrom\tto\tmass\n";
    for (const FlowEdge& e : r.discrete->edges)
      os << e.step << "\t" << e.from << "\t" << e.to << "\t" << e.mass << "\n";
  } else if (r.gaussian) {
    os << "t\tentity";
    for (Eigen::Index i = 0; i < m; ++i) os << "\tmu" << i;
    // Column-major flattening of the output covariance.
    for (Eigen::Index c = 0; c < m; ++c)
      for (Eigen::Index rr = 0; rr < m; ++rr) os << "\tcov_" << rr << "_" << c;
    os << "\n";
    for (const GaussianFlowPoint& p : r.gaussian->flow) {
      os << p.t << "\t0";
      for (Eigen::Index i = 0; i < m; ++i) os << "\t" << p.mean(i);
      for (Eigen::Index c = 0; c < m; ++c)
        for (Eigen::Index rr = 0; rr < m; ++rr) os << "\t" << p.cov(rr, c);
      os << "\n";
    }
  }
}

void emit_plot_data(const TrackingResult& r, const LinearSystem& sys, const std::string& path,
                    const PlotOptions& opts) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_plot_data(r, sys, out, opts);
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace omt
