#include "omt/sdp_splitting.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "omt/error.hpp"

namespace omt {

namespace {

double norm_sq(const std::vector<SymMatrix>& v) {
  double s = 0.0;
  for (const SymMatrix& b : v) s += b.matrix().squaredNorm();
  return s;
}

// Packs the ADMM state (y, u) into one vector and back.
class StateLayout {
 public:
  explicit StateLayout(const std::vector<SymMatrix>& shape) {
    for (const SymMatrix& b : shape) dims_.push_back(b.dim());
    for (Eigen::Index d : dims_) half_ += d * d;
  }

  Eigen::Index size() const { return 2 * half_; }

  Vector pack(const std::vector<SymMatrix>& y, const std::vector<SymMatrix>& u) const {
    Vector s(size());
    Eigen::Index o = 0;
    for (const SymMatrix& b : y) {
      s.segment(o, b.matrix().size()) = b.matrix().reshaped();
      o += b.matrix().size();
    }
    for (const SymMatrix& b : u) {
      s.segment(o, b.matrix().size()) = b.matrix().reshaped();
      o += b.matrix().size();
    }
    return s;
  }

  void unpack(const Vector& s, std::vector<SymMatrix>& y, std::vector<SymMatrix>& u) const {
    y.resize(dims_.size());
    u.resize(dims_.size());
    Eigen::Index o = 0;
    for (size_t b = 0; b < dims_.size(); ++b) {
      const Eigen::Index d = dims_[b];
      y[b] = SymMatrix::symmetrized(s.segment(o, d * d).reshaped(d, d));
      o += d * d;
    }
    for (size_t b = 0; b < dims_.size(); ++b) {
      const Eigen::Index d = dims_[b];
      u[b] = SymMatrix::symmetrized(s.segment(o, d * d).reshaped(d, d));
      o += d * d;
    }
  }

 private:
  std::vector<Eigen::Index> dims_;
  Eigen::Index half_ = 0;
};

// Type-II Anderson acceleration on a fixed-point map, memory `mem`.
class Anderson {
 public:
  explicit Anderson(int mem) : mem_(mem) {}

  void reset() {
    df_.clear();
    dg_.clear();
    have_last_ = false;
  }

  // Records (f, g = f - s) for the current iterate and returns the
  // extrapolated next iterate.
  Vector extrapolate(const Vector& f, const Vector& g) {
    if (have_last_) {
      df_.push_back(f - last_f_);
      dg_.push_back(g - last_g_);
      if (static_cast<int>(df_.size()) > mem_) {
        df_.pop_front();
        dg_.pop_front();
      }
    }
    last_f_ = f;
    last_g_ = g;
    have_last_ = true;
    if (dg_.empty()) return f;
    const auto cols = static_cast<Eigen::Index>(dg_.size());
    Matrix dgm(g.size(), cols), dfm(g.size(), cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      dgm.col(j) = dg_[static_cast<size_t>(j)];
      dfm.col(j) = df_[static_cast<size_t>(j)];
    }
    Matrix gram = dgm.transpose() * dgm;
    gram.diagonal().array() += 1e-10 * std::max(gram.diagonal().maxCoeff(), 1e-300);
    const Vector gamma = gram.ldlt().solve(dgm.transpose() * g);
    if (!gamma.allFinite()) return f;
    return f - dfm * gamma;
  }

 private:
  int mem_;
  std::deque<Vector> df_, dg_;
  Vector last_f_, last_g_;
  bool have_last_ = false;
};

}  // namespace

void project_blocks_psd(std::vector<SymMatrix>& blocks, kernels::Backend backend) {
  const auto count = static_cast<long>(blocks.size());
  if (backend == kernels::Backend::OpenMP) {
#pragma omp parallel for schedule(dynamic)
    for (long b = 0; b < count; ++b) blocks[b] = psd_project(blocks[b]);
  } else {
    for (long b = 0; b < count; ++b) blocks[b] = psd_project(blocks[b]);
  }
}

BlockSdpResult solve_block_sdp(const BlockSdp& problem, const SdpOptions& opts) {
  const size_t nb = problem.objective.size();
  if (nb == 0) throw InvalidInput("block SDP needs at least one block");
  if (!(opts.relaxation > 0.0 && opts.relaxation < 2.0))
    throw InvalidInput("ADMM relaxation must lie in (0, 2)");
  if (!(opts.rho >= 0.0)) throw InvalidInput("ADMM penalty must be non-negative");

  double dim = 0.0;
  for (const SymMatrix& w : problem.objective) dim += static_cast<double>(w.matrix().size());
  const double sqrt_dim = std::sqrt(dim);

  // Work with X = scale * X~ and a unit-norm objective so rho = 1 is a
  // sensible start whatever the units of the data.
  std::vector<SymMatrix> zero(nb);
  for (size_t b = 0; b < nb; ++b) zero[b] = SymMatrix(problem.objective[b].dim());
  const double anchor = std::sqrt(norm_sq(problem.project_affine(zero)));
  const double scale = anchor > 0.0 ? anchor : 1.0;
  const double obj_norm = std::sqrt(norm_sq(problem.objective));
  std::vector<SymMatrix> w(nb);
  for (size_t b = 0; b < nb; ++b)
    w[b] = SymMatrix::symmetrized(problem.objective[b].matrix() / (obj_norm > 0.0 ? obj_norm : 1.0));
  auto project = [&](const std::vector<SymMatrix>& v) {
    std::vector<SymMatrix> up(v.size());
    for (size_t b = 0; b < v.size(); ++b) up[b] = SymMatrix::symmetrized(v[b].matrix() * scale);
    std::vector<SymMatrix> p = problem.project_affine(up);
    for (SymMatrix& b : p) b = SymMatrix::symmetrized(b.matrix() / scale);
    return p;
  };

  std::vector<SymMatrix> y(nb), u(nb);
  if (problem.initial.empty()) {
    y = zero;
  } else {
    for (size_t b = 0; b < nb; ++b)
      y[b] = SymMatrix::symmetrized(problem.initial[b].matrix() / scale);
  }
  y = project(y);
  project_blocks_psd(y, opts.backend);
  for (size_t b = 0; b < nb; ++b) u[b] = SymMatrix(y[b].dim());

  const double alpha = opts.relaxation;
  double rho = opts.rho;
  if (rho == 0.0) {
    // Multiplier over primal size at the start: <W, X0> / |X0|^2.
    double obj0 = 0.0;
    for (size_t b = 0; b < nb; ++b) obj0 += w[b].matrix().cwiseProduct(y[b].matrix()).sum();
    const double size0 = norm_sq(y);
    rho = size0 > 0.0 ? std::clamp(obj0 / size0, 1e-4, 1.0) : 1.0;
  }

  // One over-relaxed ADMM step from (y, u); x is the affine iterate.
  std::vector<SymMatrix> x(nb), y_next(nb), u_next(nb);
  auto step = [&](const std::vector<SymMatrix>& y0, const std::vector<SymMatrix>& u0) {
    std::vector<SymMatrix> v(nb);
    for (size_t b = 0; b < nb; ++b)
      v[b] = SymMatrix::symmetrized(y0[b].matrix() - u0[b].matrix() - w[b].matrix() / rho);
    x = project(v);
    std::vector<SymMatrix> relaxed(nb);
    for (size_t b = 0; b < nb; ++b) {
      relaxed[b] = SymMatrix::symmetrized(alpha * x[b].matrix() + (1.0 - alpha) * y0[b].matrix());
      y_next[b] = SymMatrix::symmetrized(relaxed[b].matrix() + u0[b].matrix());
    }
    project_blocks_psd(y_next, opts.backend);
    for (size_t b = 0; b < nb; ++b)
      u_next[b] = SymMatrix::symmetrized(u0[b].matrix() + relaxed[b].matrix() - y_next[b].matrix());
  };

  const StateLayout layout(y);
  Anderson accel(opts.anderson_memory);
  Vector s = layout.pack(y, u);
  step(y, u);
  Vector f = layout.pack(y_next, u_next);
  Vector g = f - s;

  constexpr int kStallWindow = 250;
  int window_start = 0;
  double window_g = std::numeric_limits<double>::infinity();

  BlockSdpResult out;
  double r = 0.0, sd = 0.0;
  for (int it = 1; it <= opts.max_iter; ++it) {
    // Residuals of the step just taken from s.
    layout.unpack(s, y, u);
    double rr = 0.0, ss = 0.0;
    for (size_t b = 0; b < nb; ++b) {
      rr += (x[b].matrix() - y_next[b].matrix()).squaredNorm();
      ss += (y_next[b].matrix() - y[b].matrix()).squaredNorm();
    }
    r = std::sqrt(rr);
    sd = rho * std::sqrt(ss);
    const double eps_pri =
        opts.tol * sqrt_dim + opts.tol * std::sqrt(std::max(norm_sq(x), norm_sq(y_next)));
    const double eps_dual = opts.tol * sqrt_dim + opts.tol * rho * std::sqrt(norm_sq(u_next));
    out.diag.iterations = it;
    if (r <= eps_pri && sd <= eps_dual) break;
    if (it == opts.max_iter) {
      std::ostringstream os;
      os << "ADMM did not converge in " << opts.max_iter << " iterations (primal residual "
         << r * scale << ", dual residual " << sd * scale << ")";
      throw NotConverged(os.str(), std::max(r, sd) * scale);
    }

    if (opts.adaptive_rho && it % 25 == 0) {
      // Balance the residuals relative to the iterate sizes.
      const double pr = r / std::max(std::sqrt(std::max(norm_sq(x), norm_sq(y_next))), 1e-300);
      const double dr = sd / std::max(rho * std::sqrt(norm_sq(u_next)), 1e-300);
      const double ratio = std::sqrt(pr / std::max(dr, 1e-300));
      double factor = 1.0;
      if (ratio > 5.0 || ratio < 0.2) factor = std::clamp(ratio, 1e-3, 1e3);
      // Degenerate problems can sit on a plateau where the map is locally
      // affine and the residuals stay balanced but flat; a smaller penalty
      // takes longer steps along the objective and leaves it sooner.
      if (factor == 1.0 && it - window_start >= kStallWindow) {
        if (g.norm() > 0.99 * window_g) factor = 0.1;
        window_start = it;
        window_g = g.norm();
      }
      if (factor != 1.0) {
        window_start = it;
        window_g = std::numeric_limits<double>::infinity();
        // Rescale the scaled dual, restart from the plain step result.
        rho *= factor;
        for (SymMatrix& b : u_next) b = SymMatrix::symmetrized(b.matrix() / factor);
        accel.reset();
        s = layout.pack(y_next, u_next);
        layout.unpack(s, y, u);
        step(y, u);
        f = layout.pack(y_next, u_next);
        g = f - s;
        continue;
      }
    }

    // Safeguarded Anderson step: keep the extrapolation only if it shrinks
    // the fixed-point residual, otherwise take the plain step.
    const Vector plain = f;
    const double g_norm = g.norm();
    Vector cand = opts.anderson_memory > 0 ? accel.extrapolate(f, g) : f;
    bool accepted = false;
    if (opts.anderson_memory > 0 && (cand - plain).norm() > 0.0) {
      layout.unpack(cand, y, u);
      step(y, u);
      const Vector fc = layout.pack(y_next, u_next);
      const Vector gc = fc - cand;
      if (gc.norm() <= g_norm) {
        s = cand;
        f = fc;
        g = gc;
        accepted = true;
      } else {
        accel.reset();
      }
    }
    if (!accepted) {
      s = plain;
      layout.unpack(s, y, u);
      step(y, u);
      f = layout.pack(y_next, u_next);
      g = f - s;
    }
  }

  for (SymMatrix& b : y_next) b = SymMatrix::symmetrized(b.matrix() * scale);
  out.x = std::move(y_next);
  out.diag.primal_residual = r * scale;
  out.diag.dual_residual = sd * scale;
  out.diag.final_rho = rho;
  for (size_t b = 0; b < nb; ++b)
    out.objective += problem.objective[b].matrix().cwiseProduct(out.x[b].matrix()).sum();
  return out;
}

}  // namespace omt
