#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "omt/error.hpp"
#include "omt/io.hpp"

using namespace omt;
using nlohmann::json;

namespace {

std::string data(const std::string& name) { return std::string(OMT_TEST_DATA_DIR) + "/" + name; }

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs `f` and returns the error it raised; fails the test if it returned.
template <typename F>
std::pair<std::string, std::string> error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return {e.error_class(), e.what()};
  }
  FAIL("expected an error");
  return {};
}

// Scoped OMTRACK_CONFIG_DIR override.
class ConfigDir {
 public:
  explicit ConfigDir(const std::string& contents) {
    dir_ = std::filesystem::temp_directory_path() /
           ("omtrack_cfg_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(dir_);
    if (!contents.empty()) std::ofstream(dir_ / "defaults.json") << contents;
    setenv("OMTRACK_CONFIG_DIR", dir_.c_str(), 1);
  }
  ~ConfigDir() {
    unsetenv("OMTRACK_CONFIG_DIR");
    std::filesystem::remove_all(dir_);
  }

 private:
  std::filesystem::path dir_;
};

json without_wall_time(json j) {
  j["diagnostics"].erase("wall_time_seconds");
  return j;
}

}  // namespace

TEST_CASE("rotation scenario file loads with the expected shape") {
  const ProblemSpec spec = load_problem(data("rotation_points.json"));
  CHECK(spec.system.state_dim() == 2);
  CHECK(spec.system.output_dim() == 1);
  CHECK(spec.times.size() == 6);
  CHECK(spec.mode == ObservationMode::Points);
  REQUIRE(spec.point_frames.size() == 6);
  for (const auto& f : spec.point_frames) CHECK(f.size() == 3);
  CHECK(spec.solver.grid.points_per_dim == 41);
  CHECK(spec.solver.grid.lower == -4.0);
}

TEST_CASE("problem files round-trip field for field") {
  for (const char* name : {"rotation_points.json", "scalar_gaussian.json"}) {
    const ProblemSpec a = load_problem(data(name));
    const json ja = problem_to_json(a);
    const ProblemSpec b = parse_problem(ja.dump());
    CHECK(problem_to_json(b) == ja);
    CHECK(b.system.a() == a.system.a());
    CHECK(b.times == a.times);
    CHECK(b.solver.sdp.anderson_memory == a.solver.sdp.anderson_memory);
  }

  // Simulated problems carry ground truth; it must survive too.
  const LinearSystem sys = reference_system("rotation");
  const auto ens = simulate_ensemble(sys, {0.0, 0.5, 1.0}, 4, 0.1, 9);
  ProblemSpec spec{sys, {0.0, 0.5, 1.0}, ObservationMode::Points, ens.frames, {}, {}, std::nullopt};
  spec.truth = GroundTruth{ens.states, ens.chains, 0.1, 9};
  spec.solver.grid.complement_basis = Matrix::Identity(2, 1);
  const std::string path = (std::filesystem::temp_directory_path() / "omtrack_rt.json").string();
  save_problem(spec, path);
  const ProblemSpec back = load_problem(path);
  std::filesystem::remove(path);
  CHECK(problem_to_json(back) == problem_to_json(spec));
  REQUIRE(back.truth.has_value());
  CHECK(back.truth->chains == ens.chains);
  CHECK(back.truth->states[2][1] == ens.states[2][1]);
}

TEST_CASE("malformed fixtures are rejected naming the field") {
  struct Case {
    const char* file;
    const char* error_class;
    const char* needle;
  };
  const Case cases[] = {
      {"bad_times.json", "invalid_input", "'times'"},
      {"bad_c_columns.json", "invalid_input", "'system.C'"},
      {"bad_missing_b.json", "parse_error", "'system.B'"},
      {"bad_version.json", "parse_error", "format_version 2"},
      {"bad_empty_frames.json", "invalid_input", "'observations.frames'"},
      {"bad_frame_count.json", "invalid_input", "2 frames for 3 times"},
      {"bad_point_dim.json", "invalid_input", "'observations.frames[1][1]'"},
      {"bad_matrix_entry.json", "parse_error", "'system.A[1][0]'"},
      {"bad_mode.json", "parse_error", "'observations.mode'"},
      {"bad_cov_not_psd.json", "invalid_input", "frame 1"},
      {"bad_syntax.json", "parse_error", "line 4, column"},
  };
  for (const Case& c : cases) {
    CAPTURE(c.file);
    const auto [cls, msg] = error_of([&] { load_problem(data(c.file)); });
    CHECK(cls == c.error_class);
    CHECK(msg.find(c.needle) != std::string::npos);
  }
  CHECK(error_of([] { load_problem(data("no_such_file.json")); }).first == "io_error");
}

TEST_CASE("format_version is required and checked") {
  json j = json::parse(slurp(data("scalar_gaussian.json")));
  j.erase("format_version");
  auto [cls, msg] = error_of([&] { problem_from_json(j); });
  CHECK(cls == "parse_error");
  CHECK(msg.find("format_version") != std::string::npos);
  j["format_version"] = "1";
  CHECK(error_of([&] { problem_from_json(j); }).second.find("integer") != std::string::npos);

  json r = {{"format_version", 7}, {"mode", "points"}};
  CHECK(error_of([&] { result_from_json(r); }).second.find("not supported") != std::string::npos);
}

TEST_CASE("solver defaults come from the config directory when set") {
  unsetenv("OMTRACK_CONFIG_DIR");
  const SolverConfig builtin = default_solver_config();
  CHECK(builtin.tol == 1e-8);
  CHECK(builtin.sdp.tol == 1e-7);
  CHECK(builtin.sdp.relaxation == 1.6);
  CHECK(builtin.grid.points_per_dim == 150);

  {
    ConfigDir dir(R"({"format_version": 1, "solver": {"tol": 1e-6, "grid": {"points": 33},
                     "sdp": {"anderson_memory": 4}}})");
    const SolverConfig cfg = default_solver_config();
    CHECK(cfg.tol == 1e-6);
    CHECK(cfg.grid.points_per_dim == 33);
    CHECK(cfg.sdp.anderson_memory == 4);
    CHECK(cfg.stage_tol == builtin.stage_tol);
    // The problem file still wins over the directory defaults.
    const ProblemSpec spec = load_problem(data("rotation_points.json"), cfg);
    CHECK(spec.solver.grid.points_per_dim == 41);
    CHECK(spec.solver.tol == 1e-6);
  }
  {
    ConfigDir empty("");
    CHECK(default_solver_config().tol == builtin.tol);
  }
  {
    ConfigDir broken(R"({"solver": {"grid": {"points": "many"}}})");
    const auto [cls, msg] = error_of([] { default_solver_config(); });
    CHECK(cls == "parse_error");
    CHECK(msg.find("solver.grid.points") != std::string::npos);
  }
}

TEST_CASE("gaussian results round-trip and carry the scalar closed form") {
  const ProblemSpec spec = load_problem(data("scalar_gaussian.json"));
  const TrackingResult r = track_gaussian(spec);
  REQUIRE(r.gaussian.has_value());
  CHECK(r.gaussian->objective == doctest::Approx(1.0).epsilon(1e-4));
  REQUIRE(r.gaussian->flow.size() == 11);
  CHECK(std::sqrt(r.gaussian->flow[5].cov(0, 0)) == doctest::Approx(1.5).epsilon(1e-3));

  const json j = result_to_json(r);
  CHECK(j["format_version"] == kFormatVersion);
  const TrackingResult back = result_from_json(j);
  CHECK(result_to_json(back) == j);
  CHECK(back.gaussian->flow[3].state_cov.matrix() == r.gaussian->flow[3].state_cov.matrix());

  std::ostringstream plot;
  write_plot_data(r, spec.system, plot);
  std::istringstream lines(plot.str());
  std::string line;
  int comments = 0, header = 0, rows = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("#", 0) == 0) ++comments;
    else if (line.rfind("t\t", 0) == 0) ++header;
    else ++rows;
  }
  CHECK(comments == 1);
  CHECK(header == 1);
  CHECK(rows == 11);
}

TEST_CASE("discrete results round-trip, repeat exactly and tabulate per path") {
  const ProblemSpec spec = load_problem(data("rotation_points.json"));
  const TrackingResult r = track_discrete(spec);
  REQUIRE(r.discrete.has_value());
  CHECK(r.discrete->objective >= 0.0);
  CHECK(r.discrete->gap <= 1e-4 * std::max(1.0, r.discrete->primal));
  CHECK(r.discrete->near_integral);
  CHECK(r.discrete->paths.size() == 3);

  const json j = result_to_json(r);
  CHECK(result_to_json(result_from_json(j)) == j);
  CHECK(without_wall_time(result_to_json(track_discrete(spec))) == without_wall_time(j));

  std::ostringstream plot;
  write_plot_data(r, spec.system, plot);
  const std::string text = plot.str();
  const auto rows = std::count(text.begin(), text.end(), '\n') - 2;
  CHECK(rows == 3 * 6);
  CHECK(text.find("t\tentity\tmass\tx0\tx1\n") != std::string::npos);

  std::ostringstream dense;
  write_plot_data(r, spec.system, dense, {4});
  const std::string dt = dense.str();
  CHECK(std::count(dt.begin(), dt.end(), '\n') - 2 == 3 * (6 + 5 * 4));
}

TEST_CASE("plot data falls back to the edge list without near-integral paths") {
  TrackingResult r;
  r.times = {0.0, 1.0};
  DiscreteResult d;
  d.edges = {{0, 0, 1, 0.5}, {0, 1, 0, 0.5}};
  r.discrete = d;
  std::ostringstream os;
  write_plot_data(r, reference_system("rotation"), os);
  CHECK(os.str().find("step\tfrom\tto\tmass\n0\t0\t1\t0.5\n0\t1\t0\t0.5\n") != std::string::npos);
  CHECK_THROWS_AS(emit_plot_data(r, reference_system("rotation"), "/nonexistent_dir/x.tsv"), IoError);
}

TEST_CASE("simulation is deterministic and exact without noise") {
  const LinearSystem sys = reference_system("rotation");
  const std::vector<double> times = {0.0, 0.7, 1.9, 3.0};
  const auto a = simulate_ensemble(sys, times, 6, 0.1, 42);
  const auto b = simulate_ensemble(sys, times, 6, 0.1, 42);
  for (size_t k = 0; k < times.size(); ++k)
    for (size_t i = 0; i < 6; ++i) CHECK(a.frames[k][i] == b.frames[k][i]);
  const auto c = simulate_ensemble(sys, times, 6, 0.1, 43);
  CHECK(c.frames[1][0] != a.frames[1][0]);

  // x(t) = [[cos t, sin t], [-sin t, cos t]] x0 for the rotation.
  const auto one = simulate_ensemble(sys, times, 1, 0.0, 5);
  const Vector x0 = one.states[0][0];
  for (size_t k = 0; k < times.size(); ++k) {
    const double t = times[k];
    const double y = std::cos(t) * x0(0) + std::sin(t) * x0(1);
    CHECK(one.frames[k][0](0) == doctest::Approx(y).epsilon(1e-13));
  }

  // Chains index the shuffled frames.
  for (size_t i = 0; i < 6; ++i)
    for (size_t k = 0; k < times.size(); ++k)
      CHECK((sys.c() * a.states[i][k] - a.frames[k][static_cast<size_t>(a.chains[i][k])]).norm() == 0.0);

  CHECK_THROWS_AS(simulate_ensemble(sys, times, 0, 0.0, 1), InvalidInput);
  CHECK_THROWS_AS(simulate_ensemble(sys, times, 2, -1.0, 1), InvalidInput);
  CHECK_THROWS_AS(reference_system("pendulum"), InvalidInput);
}
