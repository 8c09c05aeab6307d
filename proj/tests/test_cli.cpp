#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string data(const std::string& name) { return std::string(OMT_TEST_DATA_DIR) + "/" + name; }

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code = -1;
  std::string out, err;
};

class Workdir {
 public:
  Workdir() {
    dir_ = fs::temp_directory_path() / ("omtrack_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  ~Workdir() { fs::remove_all(dir_); }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

  // Runs the CLI with `args` (already shell-quoted), optional env prefix.
  Run run(const std::string& args, const std::string& env = "") const {
    const char* bin = std::getenv("OMTRACK_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "OMTRACK_BIN must point at the omtrack binary");
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = env + " '" + bin + "' " + args + " > '" + out.string() + "' 2> '" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

 private:
  fs::path dir_;
};

json error_json(const Run& r) {
  const json j = json::parse(r.err);
  REQUIRE(j.contains("error"));
  return j.at("error");
}

}  // namespace

TEST_CASE("validate accepts a good file silently") {
  Workdir w;
  const Run r = w.run("validate --input '" + data("rotation_points.json") + "'");
  CHECK(r.code == 0);
  CHECK(r.out.empty());
  CHECK(r.err.empty());
}

TEST_CASE("every malformed fixture fails validation with a named field") {
  Workdir w;
  for (const auto& entry : fs::directory_iterator(OMT_TEST_DATA_DIR)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("bad_", 0) != 0) continue;
    CAPTURE(name);
    const Run r = w.run("validate --input '" + entry.path().string() + "'");
    CHECK(r.code == 3);
    const json e = error_json(r);
    const std::string cls = e.at("class");
    CHECK((cls == "invalid_input" || cls == "parse_error"));
    const std::string msg = e.at("message");
    CHECK((msg.find("field '") != std::string::npos || msg.find("line ") != std::string::npos ||
           msg.find("format_version") != std::string::npos));
  }
}

TEST_CASE("usage errors exit 2 with a usage error class") {
  Workdir w;
  Run r = w.run("");
  CHECK(r.code == 2);
  CHECK(error_json(r).at("class") == "usage");
  r = w.run("validate --input '" + data("no_such_file.json") + "'");
  CHECK(r.code == 2);
  r = w.run("track-discrete --input '" + data("rotation_points.json") + "' --grid-points many");
  CHECK(r.code == 2);
  r = w.run("--help");
  CHECK(r.code == 0);
  CHECK(r.out.find("track-discrete") != std::string::npos);
}

TEST_CASE("track-gaussian reproduces the scalar closed form") {
  Workdir w;
  const fs::path out = w / "gauss.json", plot = w / "gauss.tsv";
  const Run r = w.run("track-gaussian --input '" + data("scalar_gaussian.json") + "' --output '" +
                      out.string() + "' --flow-samples 21 --plot-data '" + plot.string() + "'");
  REQUIRE(r.code == 0);
  const json j = json::parse(slurp(out));
  CHECK(j["format_version"] == 1);
  CHECK(j["mode"] == "gaussian");
  CHECK(j["gaussian"]["objective"].get<double>() == doctest::Approx(1.0).epsilon(1e-4));
  REQUIRE(j["gaussian"]["flow"].size() == 21);
  const double var_mid = j["gaussian"]["flow"][10]["cov"][0][0];
  CHECK(std::sqrt(var_mid) == doctest::Approx(1.5).epsilon(1e-3));
  const std::string table = slurp(plot);
  CHECK(std::count(table.begin(), table.end(), '\n') == 21 + 2);
}

TEST_CASE("track-discrete recovers the simulated hidden states") {
  Workdir w;
  const fs::path problem = w / "sim.json", out = w / "res.json";
  Run r = w.run("simulate --scenario rotation -N 3 -T 4 --seed 11 --init-scale 1 "
                "--grid-bounds -4,4 --grid-points 81 --output '" + problem.string() + "'");
  REQUIRE(r.code == 0);
  const json spec = json::parse(slurp(problem));
  CHECK(spec["truth"]["seed"] == 11);
  CHECK(spec["solver"]["grid"]["points"] == 81);

  // Same seed, same file.
  r = w.run("simulate --scenario rotation -N 3 -T 4 --seed 11 --init-scale 1 "
            "--grid-bounds -4,4 --grid-points 81");
  CHECK(json::parse(r.out) == spec);

  // Costs here are ~1e-2, so anneal past the default stop of 1e-3.
  const std::string solve = "track-discrete --epsilon-schedule 1,1e-5,0.5 --input '" + problem.string() + "'";
  r = w.run(solve + " --output '" + out.string() + "'");
  REQUIRE(r.code == 0);
  const json res = json::parse(slurp(out));
  const json& d = res["discrete"];
  CHECK(d["near_integral"] == true);
  CHECK(d["gap"].get<double>() <= 1e-4 * std::max(1.0, d["primal"].get<double>()));
  REQUIRE(d["paths"].size() == 3);

  // Each true path is matched by an extracted path within 1.5 grid cells.
  const double cell = 8.0 / 80.0;
  for (const json& truth : spec["truth"]["states"]) {
    bool matched = false;
    for (const json& path : d["paths"]) {
      bool all = true;
      for (size_t k = 0; k < truth.size(); ++k)
        for (size_t i = 0; i < 2; ++i)
          all = all && std::abs(path["states"][k][i].get<double>() - truth[k][i].get<double>()) <=
                           1.5 * cell;
      matched = matched || all;
    }
    CHECK(matched);
  }

  // Identical inputs, identical results apart from wall time.
  const fs::path again = w / "res2.json";
  REQUIRE(w.run(solve + " --output '" + again.string() + "'").code == 0);
  json a = res, b = json::parse(slurp(again));
  a["diagnostics"].erase("wall_time_seconds");
  b["diagnostics"].erase("wall_time_seconds");
  CHECK(a == b);
}

TEST_CASE("solver failures exit 4 and leave an error block in the result") {
  Workdir w;
  fs::create_directories(w / "cfg");
  std::ofstream(w / "cfg" / "defaults.json") << R"({"solver": {"sdp": {"max_iter": 2}}})";
  const fs::path out = w / "fail.json";
  const Run r = w.run("track-gaussian --input '" + data("scalar_gaussian.json") + "' --output '" +
                          out.string() + "'",
                      "OMTRACK_CONFIG_DIR='" + (w / "cfg").string() + "'");
  CHECK(r.code == 4);
  CHECK(error_json(r).at("class") == "not_converged");
  const json j = json::parse(slurp(out));
  CHECK(j["error"]["class"] == "not_converged");
  CHECK(j["error"]["message"].get<std::string>().find("did not converge") != std::string::npos);
}

TEST_CASE("bad flag values and unwritable outputs map to their exit codes") {
  Workdir w;
  Run r = w.run("track-discrete --input '" + data("rotation_points.json") + "' --epsilon-schedule 1,2");
  CHECK(r.code == 3);
  CHECK(error_json(r).at("message").get<std::string>().find("--epsilon-schedule") != std::string::npos);
  r = w.run("track-discrete --input '" + data("rotation_points.json") + "' --epsilon-schedule 1,0.1,2");
  CHECK(r.code == 3);
  r = w.run("track-discrete --input '" + data("scalar_gaussian.json") + "'");
  CHECK(r.code == 3);
  r = w.run("gramian --input '" + data("scalar_gaussian.json") + "' --output /nonexistent_dir/g.json");
  CHECK(r.code == 5);
  CHECK(error_json(r).at("class") == "io_error");
}

TEST_CASE("gramian prints the per-interval kernels") {
  Workdir w;
  const Run r = w.run("gramian --input '" + data("rotation_points.json") + "'");
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  REQUIRE(j["kernels"].size() == 5);
  const json& k = j["kernels"][0];
  CHECK(k["dt"] == 1.0);
  // Rotation by one radian, and its Gramian int_0^1 e^{As} e^{A^T s} ds = I.
  CHECK(k["transition"][0][0].get<double>() == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
  CHECK(k["transition"][0][1].get<double>() == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
  CHECK(k["gramian"][0][0].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(k["gramian"][0][1].get<double>()) < 1e-12);
}
