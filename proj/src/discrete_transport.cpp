#include "omt/discrete_transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "omt/error.hpp"

namespace omt {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double max_abs_diff(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Observed coordinate and scale for each row of C, if C picks coordinates.
std::optional<std::vector<std::pair<Eigen::Index, double>>> coordinate_selection(const Matrix& c) {
  std::vector<std::pair<Eigen::Index, double>> picks;
  std::vector<bool> used(static_cast<size_t>(c.cols()), false);
  for (Eigen::Index r = 0; r < c.rows(); ++r) {
    Eigen::Index where = -1;
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      if (c(r, j) == 0.0) continue;
      if (where >= 0) return std::nullopt;
      where = j;
    }
    if (where < 0 || used[where]) return std::nullopt;
    used[where] = true;
    picks.emplace_back(where, c(r, where));
  }
  return picks;
}

// All points of the product grid over `dims` free coordinates (column per point).
Matrix product_grid(int dims, const std::vector<double>& axis) {
  const auto per = static_cast<Eigen::Index>(axis.size());
  Eigen::Index total = 1;
  for (int d = 0; d < dims; ++d) {
    total *= per;
    if (total > 10'000'000) throw InvalidInput("state grid too large (over 1e7 points per support point)");
  }
  Matrix out(dims, total);
  for (Eigen::Index idx = 0; idx < total; ++idx) {
    Eigen::Index rem = idx;
    for (int d = dims - 1; d >= 0; --d) {
      out(d, idx) = axis[static_cast<size_t>(rem % per)];
      rem /= per;
    }
  }
  return out;
}

double log_sum_exp(std::span<const double> v) {
  double top = -kInf;
  for (double x : v) top = std::max(top, x);
  if (top == -kInf) return top;
  double s = 0.0;
  for (double x : v) s += std::exp(x - top);
  return top + std::log(s);
}

}  // namespace

DiscreteMeasure DiscreteMeasure::from_points(const std::vector<Vector>& points, double merge_tol) {
  DiscreteMeasure out;
  std::vector<double> w;
  for (const Vector& p : points) {
    bool merged = false;
    for (size_t j = 0; j < out.support.size(); ++j) {
      if (max_abs_diff(out.support[j], p) <= merge_tol) {
        w[j] += 1.0;
        merged = true;
        break;
      }
    }
    if (!merged) {
      out.support.push_back(p);
      w.push_back(1.0);
    }
  }
  out.weights = Eigen::Map<Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
  return out;
}

std::vector<double> linspace(double lower, double upper, int count) {
  if (count < 1) throw InvalidInput("linspace needs at least one point");
  if (count == 1) return {0.5 * (lower + upper)};
  std::vector<double> out(static_cast<size_t>(count));
  const double step = (upper - lower) / (count - 1);
  for (int i = 0; i < count; ++i) out[i] = lower + step * i;
  out.back() = upper;
  return out;
}

std::vector<StateGrid> build_state_grids(const std::vector<DiscreteMeasure>& outputs,
                                         const LinearSystem& sys, const GridConfig& cfg) {
  const Matrix& c = sys.c();
  const auto n = sys.state_dim(), m = sys.output_dim();
  if (!(cfg.upper > cfg.lower)) throw InvalidInput("grid bounds must satisfy lower < upper");

  enum class Mode { Invertible, Basis, Selection } mode;
  Matrix c_inv, c_pinv, basis;
  std::vector<std::pair<Eigen::Index, double>> picks;
  std::vector<Eigen::Index> free_coords;

  if (m == n && rcond_estimate(c) > 1e-12) {
    mode = Mode::Invertible;
    c_inv = linear_solve(c, Matrix(Matrix::Identity(n, n)));
  } else if (cfg.complement_basis) {
    mode = Mode::Basis;
    basis = *cfg.complement_basis;
    if (basis.rows() != n) throw InvalidInput("complement basis must have one row per state");
    if (numerical_rank(c) != m) throw InvalidInput("C must have full row rank");
    if (basis.cols() != n - m || numerical_rank(basis) != n - m)
      throw InvalidInput("complement basis must have n - m independent columns");
    if ((c * basis).norm() > 1e-9 * std::max(1.0, c.norm() * basis.norm()))
      throw InvalidInput("complement basis columns must lie in the null space of C");
    c_pinv = c.completeOrthogonalDecomposition().pseudoInverse();
  } else if (auto sel = coordinate_selection(c)) {
    mode = Mode::Selection;
    picks = *sel;
    std::vector<bool> observed(static_cast<size_t>(n), false);
    for (auto& [idx, scale] : picks) observed[idx] = true;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!observed[i]) free_coords.push_back(i);
  } else {
    throw InvalidInput(
        "C is not a coordinate selection; supply grid.complement_basis spanning its null space");
  }

  const int free_dims = mode == Mode::Invertible ? 0
                        : mode == Mode::Basis    ? static_cast<int>(n - m)
                                                 : static_cast<int>(free_coords.size());
  const Matrix free_grid =
      product_grid(free_dims, linspace(cfg.lower, cfg.upper, cfg.points_per_dim));
  const Eigen::Index per_support = free_grid.cols();

  std::vector<StateGrid> grids;
  grids.reserve(outputs.size());
  for (size_t k = 0; k < outputs.size(); ++k) {
    const DiscreteMeasure& mu = outputs[k];
    if (mu.support.empty()) {
      std::ostringstream os;
      os << "output measure " << k << " has empty support";
      throw InvalidInput(os.str());
    }
    StateGrid g;
    g.num_bins = static_cast<int>(mu.support.size());
    g.points.resize(n, per_support * g.num_bins);
    g.bin.resize(static_cast<size_t>(g.points.cols()));
    for (int j = 0; j < g.num_bins; ++j) {
      const Vector& y = mu.support[j];
      if (y.size() != m) {
        std::ostringstream os;
        os << "output measure " << k << " point " << j << " has dimension " << y.size()
           << ", expected " << m;
        throw InvalidInput(os.str());
      }
      for (Eigen::Index f = 0; f < per_support; ++f) {
        const Eigen::Index col = j * per_support + f;
        Vector x(n);
        switch (mode) {
          case Mode::Invertible:
            x = c_inv * y;
            break;
          case Mode::Basis:
            x = c_pinv * y + basis * free_grid.col(f);
            break;
          case Mode::Selection:
            x.setZero();
            for (Eigen::Index r = 0; r < m; ++r) x(picks[r].first) = y(r) / picks[r].second;
            for (size_t d = 0; d < free_coords.size(); ++d)
              x(free_coords[d]) = free_grid(static_cast<Eigen::Index>(d), f);
            break;
        }
        g.points.col(col) = x;
        const double miss = (c * x - y).cwiseAbs().maxCoeff();
        g.bin[col] = miss <= cfg.snap_tol * std::max(1.0, y.cwiseAbs().maxCoeff()) ? j : -1;
      }
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

ChainCosts::ChainCosts(const std::vector<StepKernel>& kernels, const std::vector<StateGrid>& grids) {
  if (grids.size() != kernels.size() + 1)
    throw InvalidInput("need exactly one more grid than step kernels");
  forward_.reserve(kernels.size());
  backward_.reserve(kernels.size());
  for (size_t k = 0; k < kernels.size(); ++k) {
    const Matrix& x0 = grids[k].points;
    const Matrix& x1 = grids[k + 1].points;
    const Matrix pushed = kernels[k].transition * x0;
    const Matrix& q = kernels[k].weight.matrix();
    Matrix c(x0.cols(), x1.cols());
    for (Eigen::Index j = 0; j < x1.cols(); ++j) {
      for (Eigen::Index i = 0; i < x0.cols(); ++i) {
        const Vector r = x1.col(j) - pushed.col(i);
        c(i, j) = std::max(0.0, r.dot(q * r));
      }
    }
    backward_.push_back(c.transpose());
    forward_.push_back(std::move(c));
  }
}

std::vector<double> EpsilonSchedule::stages() const {
  if (!(start > 0.0) || !(stop > 0.0)) throw InvalidInput("epsilon schedule must be positive");
  if (!(factor > 0.0 && factor < 1.0) && start != stop)
    throw InvalidInput("epsilon schedule factor must lie in (0, 1)");
  std::vector<double> out;
  for (double e = start; e > stop * (1.0 + 1e-12); e *= factor) out.push_back(e);
  out.push_back(stop);
  return out;
}

namespace {

// Scaling iterations for one chain problem. Messages are kept in log form
// in both domains; the plain domain only changes how contractions are done.
class ChainScaling {
 public:
  ChainScaling(const ChainCosts& costs, const std::vector<DiscreteMeasure>& outputs,
               const std::vector<StateGrid>& grids, const ChainSolverOptions& opts)
      : costs_(costs), grids_(grids), opts_(opts), times_(grids.size()) {
    log_rho_.resize(times_);
    rho_.resize(times_);
    members_.resize(times_);
    u_.resize(times_);
    fwd_.resize(times_);
    bwd_.resize(times_);
    for (size_t k = 0; k < times_; ++k) {
      rho_[k] = outputs[k].weights / outputs[k].total_mass();
      log_rho_[k] = rho_[k].array().log();
      members_[k].resize(static_cast<size_t>(grids[k].num_bins));
      for (Eigen::Index x = 0; x < grids[k].size(); ++x) {
        const int b = grids[k].bin[x];
        if (b >= 0) members_[k][b].push_back(static_cast<int>(x));
      }
      for (int b = 0; b < grids[k].num_bins; ++b) {
        if (members_[k][b].empty()) {
          std::ostringstream os;
          os << "output point " << b << " at time " << k << " is not hit by any grid point";
          throw InvalidInput(os.str());
        }
      }
      u_[k] = Vector::Zero(grids[k].num_bins);
      fwd_[k].assign(static_cast<size_t>(grids[k].size()), 0.0);
      bwd_[k].assign(static_cast<size_t>(grids[k].size()), 0.0);
    }
  }

  void set_epsilon(double eps, const std::vector<Vector>& phi) {
    eps_ = eps;
    for (size_t k = 0; k < times_; ++k) u_[k] = phi[k] / eps;
    if (opts_.domain == ScalingDomain::Plain) {
      fwd_kernel_.clear();
      bwd_kernel_.clear();
      for (size_t k = 0; k + 1 < times_; ++k) {
        fwd_kernel_.push_back((-costs_.forward(k) / eps).array().exp().matrix());
        bwd_kernel_.push_back((-costs_.backward(k) / eps).array().exp().matrix());
      }
    }
  }

  std::vector<Vector> potentials() const {
    std::vector<Vector> phi(times_);
    for (size_t k = 0; k < times_; ++k) phi[k] = eps_ * u_[k];
    return phi;
  }

  // Returns the largest pre-update L1 residual over the pass.
  double forward_pass(bool update) {
    double worst = 0.0;
    for (size_t k = 0; k < times_; ++k) {
      if (k > 0) contract(k - 1, fwd_[k - 1], costs_.forward(k - 1), fwd_[k], true);
      if (update) worst = std::max(worst, rescale(k));
    }
    return worst;
  }

  double backward_pass(bool update) {
    double worst = 0.0;
    for (size_t k = times_; k-- > 0;) {
      if (k + 1 < times_) contract(k + 1, bwd_[k + 1], costs_.backward(k), bwd_[k], false);
      if (update) worst = std::max(worst, rescale(k));
    }
    return worst;
  }

  double run_stage(double tol, int max_iter, int& iterations) {
    backward_pass(false);
    double residual = kInf;
    for (int it = 0; it < max_iter; ++it) {
      const double r1 = forward_pass(true);
      const double r2 = backward_pass(true);
      ++iterations;
      residual = std::max(r1, r2);
      if (residual <= tol) break;
      if (opts_.newton_every > 0 && (it + 1) % opts_.newton_every == 0 && newton_step()) {
        residual = current_residual();
        if (residual <= tol) break;
      }
    }
    return residual;
  }

  // Damped Newton ascent on the bin-level dual
  //   G(u) = sum_k <rho_k, u_k> - Z(u),
  // whose Hessian is minus the matrix of joint bin masses. Returns false if
  // no step increased G. Leaves fresh messages behind.
  bool newton_step() {
    forward_pass(false);
    backward_pass(false);
    const Vector grad = gradient();
    const Matrix joint = joint_bin_masses();
    const SymEig eig = sym_eig(SymMatrix::symmetrized(joint));
    const double cut = 1e-13 * std::max(eig.values(0), 1e-300);
    Vector coeff = eig.vectors.transpose() * grad;
    for (Eigen::Index i = 0; i < coeff.size(); ++i)
      coeff(i) = eig.values(i) > cut ? coeff(i) / eig.values(i) : 0.0;
    const Vector dir = eig.vectors * coeff;
    const double slope = grad.dot(dir);
    if (!(slope > 0.0) || !dir.allFinite()) return false;

    const std::vector<Vector> saved = u_;
    const double base = dual_value();
    for (double t = 1.0; t > 1e-6; t *= 0.5) {
      apply(saved, dir, t);
      forward_pass(false);
      const double trial = dual_value();
      if (std::isfinite(trial) && trial >= base + 0.25 * t * slope) {
        backward_pass(false);
        return true;
      }
    }
    u_ = saved;
    forward_pass(false);
    backward_pass(false);
    return false;
  }

  // Couplings and state marginals from fresh messages.
  CouplingChain assemble() {
    forward_pass(false);
    backward_pass(false);
    CouplingChain out;
    for (size_t k = 0; k < times_; ++k) {
      Vector m(grids_[k].size());
      for (Eigen::Index x = 0; x < m.size(); ++x)
        m(x) = std::exp(fwd_[k][x] + scaled(k, x) + bwd_[k][x]);
      out.state_marginals.push_back(std::move(m));
    }
    for (size_t k = 0; k + 1 < times_; ++k) {
      const Matrix& c = costs_.forward(k);
      Matrix pi(c.rows(), c.cols());
      for (Eigen::Index j = 0; j < c.cols(); ++j) {
        const double right = scaled(k + 1, j) + bwd_[k + 1][j];
        for (Eigen::Index i = 0; i < c.rows(); ++i) {
          const double left = fwd_[k][i] + scaled(k, i);
          const double v = left + right - c(i, j) / eps_;
          pi(i, j) = v > -700.0 ? std::exp(v) : 0.0;
        }
      }
      out.couplings.push_back(std::move(pi));
    }
    return out;
  }

  const std::vector<Vector>& rho() const { return rho_; }

 private:
  size_t offset(size_t k) const {
    size_t o = 0;
    for (size_t i = 0; i < k; ++i) o += members_[i].size();
    return o;
  }

  size_t total_bins() const { return offset(times_); }

  void apply(const std::vector<Vector>& base, const Vector& dir, double t) {
    for (size_t k = 0; k < times_; ++k)
      u_[k] = base[k] + t * dir.segment(static_cast<Eigen::Index>(offset(k)), base[k].size());
  }

  // log of the total Gibbs mass; needs a fresh forward pass.
  double log_total() const {
    const size_t k = times_ - 1;
    std::vector<double> v;
    v.reserve(fwd_[k].size());
    for (Eigen::Index x = 0; x < grids_[k].size(); ++x) v.push_back(fwd_[k][x] + scaled(k, x));
    return log_sum_exp(v);
  }

  double dual_value() const {
    double lin = 0.0;
    for (size_t k = 0; k < times_; ++k) lin += rho_[k].dot(u_[k]);
    return lin - std::exp(log_total());
  }

  // Bin masses of the current Gibbs measure; needs fresh messages.
  Vector bin_mass(size_t k) const {
    Vector out(static_cast<Eigen::Index>(members_[k].size()));
    std::vector<double> vals;
    for (size_t b = 0; b < members_[k].size(); ++b) {
      vals.clear();
      for (int x : members_[k][b]) vals.push_back(fwd_[k][x] + bwd_[k][x]);
      out(static_cast<Eigen::Index>(b)) = std::exp(log_sum_exp(vals) + u_[k](b));
    }
    return out;
  }

  Vector gradient() const {
    Vector g(static_cast<Eigen::Index>(total_bins()));
    for (size_t k = 0; k < times_; ++k)
      g.segment(static_cast<Eigen::Index>(offset(k)), rho_[k].size()) = rho_[k] - bin_mass(k);
    return g;
  }

  double current_residual() const {
    double worst = 0.0;
    for (size_t k = 0; k < times_; ++k)
      worst = std::max(worst, (bin_mass(k) - rho_[k]).cwiseAbs().sum());
    return worst;
  }

  // P[(i,a),(j,b)] = Gibbs mass of tuples with bin a at time i and b at time j.
  Matrix joint_bin_masses() {
    const auto dim = static_cast<Eigen::Index>(total_bins());
    Matrix p = Matrix::Zero(dim, dim);
    for (size_t k = 0; k < times_; ++k) {
      const Vector m = bin_mass(k);
      const auto o = static_cast<Eigen::Index>(offset(k));
      for (Eigen::Index b = 0; b < m.size(); ++b) p(o + b, o + b) = m(b);
    }
    std::vector<double> msg, next;
    std::vector<double> vals;
    for (size_t i = 0; i + 1 < times_; ++i) {
      for (size_t a = 0; a < members_[i].size(); ++a) {
        msg.assign(fwd_[i].size(), -kInf);
        for (int x : members_[i][a]) msg[x] = fwd_[i][x] + u_[i](a);
        const auto row = static_cast<Eigen::Index>(offset(i) + a);
        for (size_t j = i + 1; j < times_; ++j) {
          if (j > i + 1)
            for (size_t x = 0; x < msg.size(); ++x) msg[x] += scaled(j - 1, static_cast<Eigen::Index>(x));
          next.assign(fwd_[j].size(), 0.0);
          kernels::log_contract(opts_.backend, costs_.forward(j - 1), msg, 1.0 / eps_, next);
          const auto o = static_cast<Eigen::Index>(offset(j));
          for (size_t b = 0; b < members_[j].size(); ++b) {
            vals.clear();
            for (int x : members_[j][b]) vals.push_back(next[x] + bwd_[j][x]);
            const double v = std::exp(log_sum_exp(vals) + u_[j](b));
            p(row, o + static_cast<Eigen::Index>(b)) = v;
            p(o + static_cast<Eigen::Index>(b), row) = v;
          }
          msg.swap(next);
        }
      }
    }
    return p;
  }

  double scaled(size_t k, Eigen::Index x) const {
    const int b = grids_[k].bin[x];
    return b >= 0 ? u_[k](b) : -kInf;
  }

  // msg_out = contraction of (msg_in + u_k) against the step costs.
  void contract(size_t k, const std::vector<double>& msg_in, const Matrix& cost,
                std::vector<double>& msg_out, bool forward) {
    scratch_.resize(msg_in.size());
    for (size_t x = 0; x < msg_in.size(); ++x)
      scratch_[x] = msg_in[x] + scaled(k, static_cast<Eigen::Index>(x));
    if (opts_.domain == ScalingDomain::Log) {
      kernels::log_contract(opts_.backend, cost, scratch_, 1.0 / eps_, msg_out);
      return;
    }
    // Plain domain: exponentiate, multiply by the precomputed Gibbs kernel.
    const size_t step = forward ? k : k - 1;
    const Matrix& kern = forward ? fwd_kernel_[step] : bwd_kernel_[step];
    for (double& v : scratch_) v = std::exp(v);
    plain_.resize(msg_out.size());
    kernels::scaled_contract(opts_.backend, kern, scratch_, plain_);
    for (size_t j = 0; j < msg_out.size(); ++j) {
      if (!(plain_[j] > 0.0) || !std::isfinite(plain_[j])) {
        std::ostringstream os;
        os << "Gibbs kernel underflow at epsilon = " << eps_
           << " in the plain scaling domain; use the log domain (the default)";
        throw NumericalUnderflow(os.str());
      }
      msg_out[j] = std::log(plain_[j]);
    }
  }

  double rescale(size_t k) {
    double residual = 0.0;
    std::vector<double> vals;
    for (size_t b = 0; b < members_[k].size(); ++b) {
      vals.clear();
      for (int x : members_[k][b]) vals.push_back(fwd_[k][x] + bwd_[k][x]);
      const double s = log_sum_exp(vals);
      if (!std::isfinite(s)) {
        std::ostringstream os;
        os << "no transport mass reaches output point " << b << " at time " << k
           << " (epsilon = " << eps_ << ")";
        throw NumericalUnderflow(os.str());
      }
      residual += std::abs(std::exp(u_[k](b) + s) - rho_[k](b));
      u_[k](b) = log_rho_[k](b) - s;
    }
    return residual;
  }

  const ChainCosts& costs_;
  const std::vector<StateGrid>& grids_;
  const ChainSolverOptions& opts_;
  size_t times_;
  double eps_ = 1.0;
  std::vector<Vector> log_rho_, rho_, u_;
  std::vector<std::vector<std::vector<int>>> members_;
  std::vector<std::vector<double>> fwd_, bwd_;
  std::vector<Matrix> fwd_kernel_, bwd_kernel_;
  std::vector<double> scratch_, plain_;
};

double common_mass(const std::vector<DiscreteMeasure>& outputs) {
  const double mass = outputs.front().total_mass();
  for (size_t k = 0; k < outputs.size(); ++k) {
    const DiscreteMeasure& mu = outputs[k];
    if (mu.weights.size() != static_cast<Eigen::Index>(mu.support.size()))
      throw InvalidInput("measure weights and support differ in length");
    if (!((mu.weights.array() > 0.0).all()) || !mu.weights.allFinite()) {
      std::ostringstream os;
      os << "output measure " << k << " has a non-positive or non-finite weight";
      throw InvalidInput(os.str());
    }
    if (std::abs(mu.total_mass() - mass) > 1e-9 * mass) {
      std::ostringstream os;
      os << "output measures must share one total mass (measure " << k << " has "
         << mu.total_mass() << ", measure 0 has " << mass << ")";
      throw InvalidInput(os.str());
    }
  }
  return mass;
}

double marginal_residual(const CouplingChain& chain, const std::vector<StateGrid>& grids,
                         const std::vector<Vector>& rho) {
  double worst = 0.0;
  for (size_t k = 0; k < grids.size(); ++k) {
    Vector agg = Vector::Zero(grids[k].num_bins);
    double stray = 0.0;
    for (Eigen::Index x = 0; x < grids[k].size(); ++x) {
      const int b = grids[k].bin[x];
      if (b >= 0)
        agg(b) += chain.state_marginals[k](x);
      else
        stray += chain.state_marginals[k](x);
    }
    worst = std::max(worst, (agg - rho[k]).cwiseAbs().sum() + stray);
  }
  for (size_t k = 0; k < chain.couplings.size(); ++k) {
    const Matrix& pi = chain.couplings[k];
    worst = std::max(worst, (pi.rowwise().sum() - chain.state_marginals[k]).cwiseAbs().sum());
    worst = std::max(worst,
                     (pi.colwise().sum().transpose() - chain.state_marginals[k + 1]).cwiseAbs().sum());
  }
  return worst;
}

}  // namespace

ChainSolution solve_chain(const std::vector<StepKernel>& kernels,
                          const std::vector<DiscreteMeasure>& outputs,
                          const std::vector<StateGrid>& grids, const ChainSolverOptions& opts) {
  const ChainCosts costs(kernels, grids);
  return solve_chain(costs, outputs, grids, opts);
}

ChainSolution solve_chain(const ChainCosts& costs, const std::vector<DiscreteMeasure>& outputs,
                          const std::vector<StateGrid>& grids, const ChainSolverOptions& opts) {
  if (outputs.size() != grids.size() || grids.size() != costs.steps() + 1)
    throw InvalidInput("solve_chain: outputs, grids and kernels disagree in length");
  for (size_t k = 0; k < grids.size(); ++k) {
    if (grids[k].num_bins != static_cast<int>(outputs[k].support.size()))
      throw InvalidInput("solve_chain: grid bins do not match output support");
    if (k < costs.steps() && (costs.forward(k).rows() != grids[k].size() ||
                              costs.forward(k).cols() != grids[k + 1].size()))
      throw InvalidInput("solve_chain: cost matrices do not match grid sizes");
  }
  const double mass = common_mass(outputs);

  ChainScaling scaling(costs, outputs, grids, opts);
  const std::vector<double> stages = opts.schedule.stages();
  std::vector<Vector> phi(grids.size());
  for (size_t k = 0; k < grids.size(); ++k) phi[k] = Vector::Zero(grids[k].num_bins);

  ChainSolution out;
  double residual = kInf;
  for (size_t s = 0; s < stages.size(); ++s) {
    const bool last = s + 1 == stages.size();
    scaling.set_epsilon(stages[s], phi);
    residual = scaling.run_stage(last ? opts.tol : std::max(opts.tol, opts.stage_tol),
                                 opts.max_iter, out.iterations);
    phi = scaling.potentials();
  }
  if (!(residual <= opts.tol)) {
    std::ostringstream os;
    os << "chain scaling did not converge at epsilon = " << stages.back() << " within "
       << opts.max_iter << " sweeps (marginal residual " << residual << ")";
    throw NotConverged(os.str(), residual);
  }

  out.chain = scaling.assemble();
  out.final_epsilon = stages.back();
  out.mass = mass;
  out.marginal_residual = marginal_residual(out.chain, grids, scaling.rho());
  out.objective = 0.0;
  for (size_t k = 0; k < costs.steps(); ++k)
    out.objective += out.chain.couplings[k].cwiseProduct(costs.forward(k)).sum();
  out.raw_objective = out.objective * mass;
  out.potentials.phi = phi;
  if (opts.refine_dual)
    out.potentials = refine_potentials(costs, grids, outputs, out.potentials, opts.refine_rounds,
                                       opts.backend);
  return out;
}

namespace {

// Forward min-plus messages of sum c - sum phi, excluding phi at the receiving time.
struct MinPlusChain {
  std::vector<std::vector<double>> fwd, bwd;
  std::vector<std::vector<int>> fwd_arg;
};

double phi_at(const DualPotentials& p, const std::vector<StateGrid>& grids, size_t k,
              Eigen::Index x) {
  const int b = grids[k].bin[x];
  return b >= 0 ? p.phi[k](b) : -kInf;
}

void minplus_forward(const ChainCosts& costs, const std::vector<StateGrid>& grids,
                     const DualPotentials& p, MinPlusChain& mp, size_t k,
                     kernels::Backend backend) {
  std::vector<double> in(mp.fwd[k - 1].size());
  for (size_t x = 0; x < in.size(); ++x)
    in[x] = mp.fwd[k - 1][x] - phi_at(p, grids, k - 1, static_cast<Eigen::Index>(x));
  kernels::min_plus(backend, costs.forward(k - 1), in, mp.fwd[k], mp.fwd_arg[k]);
}

void minplus_backward(const ChainCosts& costs, const std::vector<StateGrid>& grids,
                      const DualPotentials& p, MinPlusChain& mp, size_t k,
                      kernels::Backend backend) {
  std::vector<double> in(mp.bwd[k + 1].size());
  std::vector<int> arg(mp.bwd[k].size());
  for (size_t x = 0; x < in.size(); ++x)
    in[x] = mp.bwd[k + 1][x] - phi_at(p, grids, k + 1, static_cast<Eigen::Index>(x));
  kernels::min_plus(backend, costs.backward(k), in, mp.bwd[k], arg);
}

MinPlusChain make_minplus(const std::vector<StateGrid>& grids) {
  MinPlusChain mp;
  for (const StateGrid& g : grids) {
    mp.fwd.emplace_back(static_cast<size_t>(g.size()), 0.0);
    mp.bwd.emplace_back(static_cast<size_t>(g.size()), 0.0);
    mp.fwd_arg.emplace_back(static_cast<size_t>(g.size()), -1);
  }
  return mp;
}

void best_response(const std::vector<StateGrid>& grids, DualPotentials& p, const MinPlusChain& mp,
                   size_t k) {
  Vector best = Vector::Constant(grids[k].num_bins, kInf);
  for (Eigen::Index x = 0; x < grids[k].size(); ++x) {
    const int b = grids[k].bin[x];
    if (b >= 0) best(b) = std::min(best(b), mp.fwd[k][x] + mp.bwd[k][x]);
  }
  p.phi[k] = best;
}

}  // namespace

DualPotentials refine_potentials(const ChainCosts& costs, const std::vector<StateGrid>& grids,
                                 const std::vector<DiscreteMeasure>& outputs,
                                 DualPotentials p, int rounds, kernels::Backend backend) {
  const size_t times = grids.size();
  if (p.phi.size() != times || outputs.size() != times)
    throw InvalidInput("refine_potentials: size mismatch");
  MinPlusChain mp = make_minplus(grids);
  for (size_t k = times - 1; k-- > 0;) minplus_backward(costs, grids, p, mp, k, backend);
  for (int r = 0; r < std::max(1, rounds); ++r) {
    if (r % 2 == 0) {
      for (size_t k = 0; k < times; ++k) {
        if (k > 0) minplus_forward(costs, grids, p, mp, k, backend);
        best_response(grids, p, mp, k);
      }
    } else {
      for (size_t k = times; k-- > 0;) {
        if (k + 1 < times) minplus_backward(costs, grids, p, mp, k, backend);
        best_response(grids, p, mp, k);
      }
    }
  }
  return p;
}

DualityReport duality_gap(const CouplingChain& chain, const DualPotentials& potentials,
                          const std::vector<DiscreteMeasure>& outputs, const ChainCosts& costs,
                          const std::vector<StateGrid>& grids, double feas_tol) {
  const size_t times = grids.size();
  if (potentials.phi.size() != times || outputs.size() != times ||
      chain.couplings.size() + 1 != times)
    throw InvalidInput("duality_gap: size mismatch");

  DualityReport rep;
  const double mass = chain.state_marginals.front().sum();
  for (size_t k = 0; k + 1 < times; ++k)
    rep.primal += chain.couplings[k].cwiseProduct(costs.forward(k)).sum();
  if (mass > 0.0) rep.primal /= mass;
  for (size_t k = 0; k < times; ++k) {
    if (potentials.phi[k].size() != grids[k].num_bins)
      throw InvalidInput("duality_gap: potential length does not match output support");
    rep.dual += potentials.phi[k].dot(outputs[k].weights) / outputs[k].total_mass();
  }
  rep.gap = rep.primal - rep.dual;

  // Exhaustive feasibility: min over every grid tuple of the slack.
  MinPlusChain mp = make_minplus(grids);
  for (size_t k = 1; k < times; ++k)
    minplus_forward(costs, grids, potentials, mp, k, kernels::Backend::Serial);
  rep.min_slack = kInf;
  Eigen::Index last = -1;
  for (Eigen::Index x = 0; x < grids.back().size(); ++x) {
    const double s = mp.fwd.back()[x] - phi_at(potentials, grids, times - 1, x);
    if (s < rep.min_slack) {
      rep.min_slack = s;
      last = x;
    }
  }
  rep.tightest_tuple.assign(times, -1);
  rep.tightest_tuple[times - 1] = static_cast<int>(last);
  for (size_t k = times - 1; k > 0 && last >= 0; --k) {
    last = mp.fwd_arg[k][last];
    rep.tightest_tuple[k - 1] = static_cast<int>(last);
  }
  if (rep.min_slack < -feas_tol * std::max(1.0, std::abs(rep.primal))) {
    std::ostringstream os;
    os << "dual potentials are infeasible: tuple (";
    for (size_t k = 0; k < times; ++k) os << (k ? ", " : "") << rep.tightest_tuple[k];
    os << ") violates the cost bound by " << -rep.min_slack;
    throw Infeasible(os.str(), -rep.min_slack);
  }
  return rep;
}

Assignment brute_force_assignment(const std::vector<std::vector<Vector>>& frames,
                                  const std::vector<StepKernel>& kernels, const Matrix& c) {
  if (frames.size() != kernels.size() + 1)
    throw InvalidInput("brute_force_assignment: need one frame per knot");
  const size_t n_particles = frames.front().size();
  const size_t steps = kernels.size();
  if (n_particles == 0) throw InvalidInput("brute_force_assignment: empty frame");
  for (const auto& f : frames)
    if (f.size() != n_particles)
      throw InvalidInput("brute_force_assignment: frames must have equal point counts");
  if (n_particles > 8 || steps > 5) {
    std::ostringstream os;
    os << "brute_force_assignment is limited to N <= 8 and T <= 5 (got N = " << n_particles
       << ", T = " << steps << ")";
    throw InvalidInput(os.str());
  }
  double perms = 1.0;
  for (size_t i = 2; i <= n_particles; ++i) perms *= static_cast<double>(i);
  if (std::pow(perms, static_cast<double>(steps)) > 2e7) {
    std::ostringstream os;
    os << "brute_force_assignment would enumerate " << std::pow(perms, static_cast<double>(steps))
       << " associations (limit 2e7)";
    throw InvalidInput(os.str());
  }

  // Cached minimal lift cost per output chain, indexed in base N.
  size_t chain_count = 1;
  for (size_t k = 0; k <= steps; ++k) chain_count *= n_particles;
  std::vector<double> cache(chain_count, std::numeric_limits<double>::quiet_NaN());
  std::vector<Vector> outs(steps + 1);
  auto chain_cost = [&](const std::vector<int>& idx) {
    size_t key = 0;
    for (int i : idx) key = key * n_particles + static_cast<size_t>(i);
    if (std::isnan(cache[key])) {
      for (size_t k = 0; k <= steps; ++k) outs[k] = frames[k][idx[k]];
      cache[key] = lift_chain(kernels, c, outs).cost;
    }
    return cache[key];
  };

  std::vector<std::vector<int>> perm(steps + 1, std::vector<int>(n_particles));
  for (auto& p : perm) std::iota(p.begin(), p.end(), 0);
  std::vector<int> idx(steps + 1);

  Assignment best;
  best.cost = kInf;
  best.runner_up_cost = kInf;
  auto evaluate = [&]() {
    double total = 0.0;
    for (size_t i = 0; i < n_particles; ++i) {
      for (size_t k = 0; k <= steps; ++k) idx[k] = perm[k][i];
      total += chain_cost(idx);
    }
    if (total < best.cost) {
      best.runner_up_cost = best.cost;
      best.cost = total;
      best.chains.assign(n_particles, std::vector<int>(steps + 1));
      for (size_t i = 0; i < n_particles; ++i)
        for (size_t k = 0; k <= steps; ++k) best.chains[i][k] = perm[k][i];
    } else if (total < best.runner_up_cost) {
      best.runner_up_cost = total;
    }
  };
  // Odometer over the permutations of frames 1..T.
  while (true) {
    evaluate();
    size_t k = steps;
    while (k >= 1) {
      if (std::next_permutation(perm[k].begin(), perm[k].end())) break;
      --k;  // this frame wrapped back to identity; carry
    }
    if (k == 0) break;
  }

  best.states.resize(n_particles);
  for (size_t i = 0; i < n_particles; ++i) {
    for (size_t k = 0; k <= steps; ++k) outs[k] = frames[k][best.chains[i][k]];
    best.states[i] = lift_chain(kernels, c, outs).states;
  }
  return best;
}

}  // namespace omt
