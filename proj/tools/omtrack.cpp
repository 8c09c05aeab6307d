// omtrack: ensemble state tracking from unordered output snapshots.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "omt/error.hpp"
#include "omt/io.hpp"

namespace {

using nlohmann::json;

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kInput = 3, kNumerical = 4, kIo = 5 };

int exit_code_for(const std::string& error_class) {
  if (error_class == "invalid_input" || error_class == "parse_error") return kInput;
  if (error_class == "io_error") return kIo;
  if (error_class == "not_converged" || error_class == "singular_matrix" ||
      error_class == "numerical_underflow" || error_class == "infeasible")
    return kNumerical;
  return kOther;
}

void report(const std::string& error_class, const std::string& message) {
  std::cerr << json{{"error", {{"class", error_class}, {"message", message}}}}.dump() << "\n";
}

std::vector<double> parse_list(const std::string& text, size_t expected, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw omt::InvalidInput(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  if (out.size() != expected)
    throw omt::InvalidInput(std::string(flag) + ": expected " + std::to_string(expected) +
                            " comma-separated values");
  return out;
}

struct Overrides {
  std::string epsilon_schedule;
  std::string grid_bounds;
  double tol = 0.0;
  int grid_points = 0;
  int flow_samples = 0;
  bool openmp = false;
};

void apply(const Overrides& o, omt::SolverConfig& cfg) {
  if (!o.epsilon_schedule.empty()) {
    const auto v = parse_list(o.epsilon_schedule, 3, "--epsilon-schedule");
    cfg.schedule = {v[0], v[1], v[2]};
    cfg.schedule.stages();
  }
  if (!o.grid_bounds.empty()) {
    const auto v = parse_list(o.grid_bounds, 2, "--grid-bounds");
    cfg.grid.lower = v[0];
    cfg.grid.upper = v[1];
  }
  if (o.tol > 0.0) cfg.tol = o.tol;
  if (o.grid_points > 0) cfg.grid.points_per_dim = o.grid_points;
  if (o.flow_samples > 0) cfg.flow_samples = o.flow_samples;
  if (o.openmp) cfg.openmp = true;
}

omt::ProblemSpec load_with_overrides(const std::string& path, const Overrides& o) {
  omt::ProblemSpec spec = omt::load_problem(path, omt::default_solver_config());
  apply(o, spec.solver);
  return spec;
}

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw omt::IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

int track(const std::string& input, const std::string& output, const std::string& plot,
          int interpolate, const Overrides& o, bool gaussian) {
  const omt::ProblemSpec spec = load_with_overrides(input, o);
  omt::TrackingResult result;
  try {
    result = gaussian ? omt::track_gaussian(spec) : omt::track_discrete(spec);
  } catch (const omt::Error& e) {
    result.mode = spec.mode;
    result.times = spec.times;
    result.error_class = e.error_class();
    result.error_message = e.what();
    if (!output.empty()) write_json(omt::result_to_json(result), output);
    report(e.error_class(), e.what());
    return exit_code_for(e.error_class());
  }
  write_json(omt::result_to_json(result), output);
  if (!plot.empty()) omt::emit_plot_data(result, spec.system, plot, {interpolate});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Track ensembles of indistinguishable linear systems from output snapshots"};
  app.require_subcommand(1);

  std::string input, output, plot, scenario = "rotation";
  unsigned long long seed = 0;
  int interpolate = 0, particles = 5, steps = 5;
  double sigma = 0.0, init_scale = 2.0;
  Overrides o;

  auto add_common = [&](CLI::App* sub, bool needs_input) {
    auto* opt = sub->add_option("--input,-i", input, "problem file (JSON)");
    if (needs_input) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--output,-o", output, "output file (default: stdout)");
  };
  auto add_solver = [&](CLI::App* sub) {
    sub->add_option("--epsilon-schedule", o.epsilon_schedule, "start,stop,factor");
    sub->add_option("--tol", o.tol, "final marginal tolerance");
    sub->add_option("--grid-bounds", o.grid_bounds, "lower,upper for unobserved coordinates");
    sub->add_option("--grid-points", o.grid_points, "grid points per unobserved dimension");
    sub->add_option("--flow-samples", o.flow_samples, "flow samples for Gaussian output");
    sub->add_flag("--openmp", o.openmp, "use the OpenMP kernels");
  };

  auto* discrete = app.add_subcommand("track-discrete", "solve the discrete transport problem");
  add_common(discrete, true);
  add_solver(discrete);
  discrete->add_option("--plot-data", plot, "write a tab-separated plot table");
  discrete->add_option("--interpolate", interpolate, "bridge samples per interval in plot data");

  auto* gaussian = app.add_subcommand("track-gaussian", "solve the Gaussian tracking problem");
  add_common(gaussian, true);
  add_solver(gaussian);
  gaussian->add_option("--plot-data", plot, "write a tab-separated plot table");

  auto* simulate = app.add_subcommand("simulate", "generate a point-ensemble problem file");
  add_common(simulate, false);
  add_solver(simulate);
  simulate->add_option("--scenario", scenario, "rotation | double-integrator (ignored with --input)");
  simulate->add_option("--seed", seed, "random seed");
  simulate->add_option("--particles,-N", particles, "ensemble size")->check(CLI::PositiveNumber);
  simulate->add_option("--steps,-T", steps, "observation intervals (times 0..T)")->check(CLI::PositiveNumber);
  simulate->add_option("--sigma", sigma, "diffusion level")->check(CLI::NonNegativeNumber);
  simulate->add_option("--init-scale", init_scale, "std. dev. of initial states");

  auto* gram = app.add_subcommand("gramian", "print transition, Gramian and cost weight per interval");
  add_common(gram, true);

  auto* validate = app.add_subcommand("validate", "check a problem file");
  add_common(validate, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report("usage", e.what());
    return kUsage;
  }

  try {
    if (app.got_subcommand(discrete)) return track(input, output, plot, interpolate, o, false);
    if (app.got_subcommand(gaussian)) return track(input, output, plot, 0, o, true);

    if (app.got_subcommand(validate)) {
      load_with_overrides(input, o);
      return kOk;
    }

    if (app.got_subcommand(gram)) {
      const omt::ProblemSpec spec = load_with_overrides(input, o);
      const auto kernels = omt::make_kernels(spec.system, spec.times);
      json out = json::array();
      auto mat = [](const omt::Matrix& m) {
        json a = json::array();
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
          json row = json::array();
          for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
          a.push_back(row);
        }
        return a;
      };
      for (const omt::StepKernel& k : kernels)
        out.push_back({{"dt", k.dt},
                       {"transition", mat(k.transition)},
                       {"gramian", mat(k.gramian.matrix())},
                       {"weight", mat(k.weight.matrix())}});
      write_json({{"format_version", omt::kFormatVersion}, {"kernels", out}}, output);
      return kOk;
    }

    if (app.got_subcommand(simulate)) {
      std::optional<omt::ProblemSpec> base;
      if (!input.empty()) base = load_with_overrides(input, o);
      const omt::LinearSystem sys = base ? base->system : omt::reference_system(scenario);
      std::vector<double> times;
      if (base) {
        times = base->times;
      } else {
        for (int k = 0; k <= steps; ++k) times.push_back(k);
      }
      omt::SimulationOptions sim;
      sim.init_scale = init_scale;
      const auto ens = omt::simulate_ensemble(sys, times, particles, sigma, seed, sim);
      omt::ProblemSpec spec{sys, times, omt::ObservationMode::Points, ens.frames, {},
                            base ? base->solver : omt::default_solver_config(), std::nullopt};
      if (!base) apply(o, spec.solver);
      spec.truth = omt::GroundTruth{ens.states, ens.chains, sigma, seed};
      write_json(omt::problem_to_json(spec), output);
      return kOk;
    }
  } catch (const omt::Error& e) {
    report(e.error_class(), e.what());
    return exit_code_for(e.error_class());
  } catch (const std::exception& e) {
    report("internal", e.what());
    return kOther;
  }
  return kUsage;
}
