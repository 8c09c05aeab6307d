#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "omt/error.hpp"
#include "omt/io.hpp"

namespace omt {

SimulatedEnsemble simulate_ensemble(const LinearSystem& sys, const std::vector<double>& times,
                                    int particles, double sigma, unsigned long long seed,
                                    const SimulationOptions& opts) {
  if (particles < 1) throw InvalidInput("simulate_ensemble: need at least one particle");
  if (!(sigma >= 0.0)) throw InvalidInput("simulate_ensemble: sigma must be non-negative");
  if (times.empty()) throw InvalidInput("simulate_ensemble: need at least one time");
  for (size_t k = 0; k + 1 < times.size(); ++k)
    if (!(times[k + 1] > times[k])) throw InvalidInput("simulate_ensemble: times must increase");
  if (!(opts.substep > 0.0)) throw InvalidInput("simulate_ensemble: substep must be positive");

  const auto n = sys.state_dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SimulatedEnsemble out;
  out.states.assign(static_cast<size_t>(particles), {});
  for (auto& path : out.states) {
    Vector x(n);
    for (Eigen::Index i = 0; i < n; ++i) x(i) = opts.init_scale * normal(rng);
    path.push_back(x);
  }

  for (size_t k = 0; k + 1 < times.size(); ++k) {
    const double dt = times[k + 1] - times[k];
    if (sigma == 0.0) {
      const Matrix phi = matrix_exp(sys.a(), dt);
      for (auto& path : out.states) path.push_back(phi * path.back());
      continue;
    }
    const int sub = std::max(1, static_cast<int>(std::ceil(dt / opts.substep - 1e-9)));
    const double h = dt / sub;
    const double noise = sigma * std::sqrt(h);
    for (auto& path : out.states) {
      Vector x = path.back();
      for (int s = 0; s < sub; ++s) {
        Vector dw(n);
        for (Eigen::Index i = 0; i < n; ++i) dw(i) = normal(rng);
        x = x + h * (sys.a() * x) + noise * dw;
      }
      path.push_back(x);
    }
  }

  out.frames.resize(times.size());
  out.chains.assign(static_cast<size_t>(particles), std::vector<int>(times.size()));
  std::vector<int> order(static_cast<size_t>(particles));
  for (size_t k = 0; k < times.size(); ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    // order[slot] = particle shown at that slot
    out.frames[k].resize(order.size());
    for (size_t slot = 0; slot < order.size(); ++slot) {
      out.frames[k][slot] = sys.c() * out.states[order[slot]][k];
      out.chains[order[slot]][k] = static_cast<int>(slot);
    }
  }
  return out;
}

LinearSystem reference_system(const std::string& name, int dim) {
  if (dim < 1) throw InvalidInput("reference_system: dimension must be positive");
  if (name == "rotation") {
    Matrix a(2, 2);
    a << 0, 1, -1, 0;
    Matrix c(1, 2);
    c << 1, 0;
    return LinearSystem(a, Matrix::Identity(2, 2), c);
  }
  if (name == "double-integrator") {
    const int n = 2 * dim;
    Matrix a = Matrix::Zero(n, n);
    a.topRightCorner(dim, dim) = Matrix::Identity(dim, dim);
    Matrix b = Matrix::Zero(n, dim);
    b.bottomRows(dim) = Matrix::Identity(dim, dim);
    Matrix c = Matrix::Zero(dim, n);
    c.leftCols(dim) = Matrix::Identity(dim, dim);
    return LinearSystem(a, b, c);
  }
  throw InvalidInput("unknown reference system '" + name + "' (rotation, double-integrator)");
}

}  // namespace omt
