#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "omt/discrete_transport.hpp"
#include "omt/error.hpp"

namespace omt {

namespace {

struct PathLabel {
  double bottleneck = -1.0;
  double cost = 0.0;
  int prev = -1;
};

// a is preferred over b: larger bottleneck, then cheaper path.
bool better(double a_bottle, double a_cost, const PathLabel& b) {
  const double scale = std::max(std::abs(a_bottle), std::abs(b.bottleneck));
  if (std::abs(a_bottle - b.bottleneck) > 1e-12 * scale) return a_bottle > b.bottleneck;
  return a_cost < b.cost;
}

}  // namespace

TrajectoryExtraction extract_trajectories(const CouplingChain& chain,
                                          const std::vector<StateGrid>& grids,
                                          const ChainCosts& costs) {
  const size_t times = grids.size();
  if (chain.couplings.size() + 1 != times) throw InvalidInput("extract_trajectories: size mismatch");
  TrajectoryExtraction out;
  const double mass = chain.state_marginals.front().sum();
  if (!(mass > 0.0)) return out;

  int max_bins = 0;
  for (const StateGrid& g : grids) max_bins = std::max(max_bins, g.num_bins);
  const size_t max_paths = 64 + 8 * static_cast<size_t>(max_bins);

  std::vector<Matrix> residual = chain.couplings;
  std::vector<std::vector<int>> grid_paths;
  std::vector<double> path_mass;
  double remaining = mass;
  while (grid_paths.size() < max_paths && remaining > 1e-6 * mass) {
    std::vector<std::vector<PathLabel>> label(times);
    label[0].assign(static_cast<size_t>(grids[0].size()), PathLabel{});
    for (auto& l : label[0]) l.bottleneck = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k + 1 < times; ++k) {
      const Matrix& r = residual[k];
      const Matrix& c = costs.forward(k);
      label[k + 1].assign(static_cast<size_t>(grids[k + 1].size()), PathLabel{});
      for (Eigen::Index j = 0; j < r.cols(); ++j) {
        PathLabel& dst = label[k + 1][j];
        for (Eigen::Index i = 0; i < r.rows(); ++i) {
          const double w = r(i, j);
          if (w <= 0.0) continue;
          const PathLabel& src = label[k][i];
          if (src.bottleneck <= 0.0) continue;
          const double bottle = std::min(src.bottleneck, w);
          const double cost = src.cost + c(i, j);
          if (dst.prev < 0 || better(bottle, cost, dst)) dst = {bottle, cost, static_cast<int>(i)};
        }
      }
    }
    int end = -1;
    for (size_t x = 0; x < label.back().size(); ++x) {
      const PathLabel& l = label.back()[x];
      if (l.prev < 0 && times > 1) continue;
      if (end < 0 || better(l.bottleneck, l.cost, label.back()[end])) end = static_cast<int>(x);
    }
    if (end < 0) break;
    const double flow = times > 1 ? label.back()[end].bottleneck : chain.state_marginals[0](end);
    if (!(flow > 1e-12 * mass)) break;

    std::vector<int> path(times);
    path[times - 1] = end;
    for (size_t k = times - 1; k > 0; --k) path[k - 1] = label[k][path[k]].prev;
    for (size_t k = 0; k + 1 < times; ++k) residual[k](path[k], path[k + 1]) -= flow;
    grid_paths.push_back(path);
    path_mass.push_back(flow);
    remaining -= flow;
    if (times == 1) break;
  }

  // Merge grid paths that visit the same output points.
  std::map<std::vector<int>, size_t> by_bins;
  std::vector<StatePath> merged;
  std::vector<double> heaviest;
  for (size_t p = 0; p < grid_paths.size(); ++p) {
    std::vector<int> bins(times);
    for (size_t k = 0; k < times; ++k) bins[k] = grids[k].bin[grid_paths[p][k]];
    auto [it, inserted] = by_bins.try_emplace(bins, merged.size());
    if (inserted) {
      StatePath sp;
      sp.bins = bins;
      sp.grid_index = grid_paths[p];
      for (size_t k = 0; k < times; ++k)
        sp.states.push_back(Vector::Zero(grids[k].points.rows()));
      merged.push_back(std::move(sp));
      heaviest.push_back(0.0);
    }
    StatePath& sp = merged[it->second];
    for (size_t k = 0; k < times; ++k)
      sp.states[k] += path_mass[p] * grids[k].points.col(grid_paths[p][k]);
    sp.mass += path_mass[p];
    if (path_mass[p] > heaviest[it->second]) {
      heaviest[it->second] = path_mass[p];
      sp.grid_index = grid_paths[p];
    }
  }
  for (StatePath& sp : merged)
    for (Vector& s : sp.states) s /= sp.mass;

  // Near-integral: substantial merged paths carry almost all of the mass.
  double min_bin = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < times; ++k) {
    Vector agg = Vector::Zero(grids[k].num_bins);
    for (Eigen::Index x = 0; x < grids[k].size(); ++x)
      if (grids[k].bin[x] >= 0) agg(grids[k].bin[x]) += chain.state_marginals[k](x);
    for (Eigen::Index b = 0; b < agg.size(); ++b)
      if (agg(b) > 1e-9 * mass) min_bin = std::min(min_bin, agg(b));
  }
  double covered = 0.0;
  std::vector<StatePath> significant;
  for (StatePath& sp : merged) {
    if (sp.mass >= 0.75 * min_bin) {
      covered += sp.mass;
      significant.push_back(std::move(sp));
    }
  }
  if (covered >= 0.98 * mass) {
    out.near_integral = true;
    std::stable_sort(significant.begin(), significant.end(),
                     [](const StatePath& a, const StatePath& b) { return a.bins < b.bins; });
    out.paths = std::move(significant);
    return out;
  }

  for (size_t k = 0; k + 1 < times; ++k) {
    const Matrix& pi = chain.couplings[k];
    for (Eigen::Index i = 0; i < pi.rows(); ++i)
      for (Eigen::Index j = 0; j < pi.cols(); ++j)
        if (pi(i, j) > 1e-9 * mass)
          out.edges.push_back({static_cast<int>(k), static_cast<int>(i), static_cast<int>(j), pi(i, j)});
  }
  return out;
}

GluedChain::GluedChain(CouplingChain chain, double tol) : chain_(std::move(chain)) {
  const size_t times = chain_.state_marginals.size();
  if (times == 0 || chain_.couplings.size() + 1 != times)
    throw InvalidInput("glue_chain: need T couplings and T + 1 marginals");
  mass_ = chain_.state_marginals.front().sum();
  if (!(mass_ > 0.0)) throw InvalidInput("glue_chain: zero total mass");
  for (size_t k = 0; k + 1 < times; ++k) {
    const Matrix& pi = chain_.couplings[k];
    if ((pi.array() < 0.0).any()) throw InvalidInput("glue_chain: negative coupling entry");
    const double row = (pi.rowwise().sum() - chain_.state_marginals[k]).cwiseAbs().sum();
    const double col =
        (pi.colwise().sum().transpose() - chain_.state_marginals[k + 1]).cwiseAbs().sum();
    const double res = std::max(row, col);
    if (res > tol * mass_) {
      std::ostringstream os;
      os << "glue_chain: coupling " << k << " is inconsistent with the state marginals "
         << "(L1 residual " << res << ")";
      throw InvalidInput(os.str());
    }
  }
}

Matrix GluedChain::pair_marginal(size_t i, size_t j) const {
  if (!(i < j) || j >= times()) throw InvalidInput("pair_marginal needs i < j < T + 1");
  Matrix p = chain_.couplings[i];
  for (size_t l = i + 1; l < j; ++l) {
    const Vector& rho = chain_.state_marginals[l];
    const Vector inv = rho.unaryExpr([](double v) { return v > 0.0 ? 1.0 / v : 0.0; });
    p = (p * inv.asDiagonal()) * chain_.couplings[l];
  }
  return p;
}

double GluedChain::tuple_probability(const std::vector<int>& tuple) const {
  if (tuple.size() != times()) throw InvalidInput("tuple_probability: wrong tuple length");
  if (times() == 1) return chain_.state_marginals[0](tuple[0]) / mass_;
  double p = chain_.couplings[0](tuple[0], tuple[1]);
  for (size_t k = 1; k + 1 < times(); ++k) {
    const double rho = chain_.state_marginals[k](tuple[k]);
    if (!(rho > 0.0)) return 0.0;
    p *= chain_.couplings[k](tuple[k], tuple[k + 1]) / rho;
  }
  return p / mass_;
}

std::vector<int> GluedChain::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&](auto&& weight, Eigen::Index count, double total) {
    double target = unif(rng) * total;
    Eigen::Index last_positive = 0;
    for (Eigen::Index x = 0; x < count; ++x) {
      const double w = weight(x);
      if (w <= 0.0) continue;
      last_positive = x;
      if (target < w) return static_cast<int>(x);
      target -= w;
    }
    return static_cast<int>(last_positive);
  };
  std::vector<int> tuple(times());
  const Vector& rho0 = chain_.state_marginals[0];
  tuple[0] = draw([&](Eigen::Index x) { return rho0(x); }, rho0.size(), rho0.sum());
  for (size_t k = 0; k + 1 < times(); ++k) {
    const Matrix& pi = chain_.couplings[k];
    const auto row = pi.row(tuple[k]);
    tuple[k + 1] = draw([&](Eigen::Index x) { return row(x); }, pi.cols(), row.sum());
  }
  return tuple;
}

GluedChain glue_chain(const CouplingChain& chain) { return GluedChain(chain); }

}  // namespace omt
