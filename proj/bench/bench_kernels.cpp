// Serial reference vs OpenMP kernels, plus one end-to-end chain solve on
// each backend. Set OMP_NUM_THREADS to compare thread counts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "omt/chain_kernels.hpp"
#include "omt/discrete_transport.hpp"
#include "omt/io.hpp"
#include "omt/sdp_splitting.hpp"

namespace {

using omt::Matrix;
using omt::kernels::Backend;

// Squared distances between two 1-D grids: the shape the chain solver sees.
Matrix grid_costs(Eigen::Index size) {
  Matrix c(size, size);
  for (Eigen::Index j = 0; j < size; ++j)
    for (Eigen::Index i = 0; i < size; ++i) {
      const double d = 8.0 * static_cast<double>(i - j) / static_cast<double>(size);
      c(i, j) = d * d;
    }
  return c;
}

std::vector<double> random_vector(Eigen::Index size, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(static_cast<size_t>(size));
  for (double& x : v) x = u(rng);
  return v;
}

template <Backend B>
void BM_LogContract(benchmark::State& state) {
  const Eigen::Index size = state.range(0);
  const double inv_eps = 1.0 / (state.range(1) == 0 ? 1.0 : 1e-3);
  const Matrix cost = grid_costs(size);
  const std::vector<double> in = random_vector(size, 1);
  std::vector<double> out(static_cast<size_t>(size));
  for (auto _ : state) {
    omt::kernels::log_contract(B, cost, in, inv_eps, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * size * size);
}

template <Backend B>
void BM_MinPlus(benchmark::State& state) {
  const Eigen::Index size = state.range(0);
  const Matrix cost = grid_costs(size);
  const std::vector<double> in = random_vector(size, 2);
  std::vector<double> out(static_cast<size_t>(size));
  std::vector<int> arg(static_cast<size_t>(size));
  for (auto _ : state) {
    omt::kernels::min_plus(B, cost, in, out, arg);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * size * size);
}

template <Backend B>
void BM_ProjectBlocks(benchmark::State& state) {
  const auto blocks = static_cast<size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<omt::SymMatrix> base(blocks);
  for (auto& b : base) {
    Matrix m(6, 6);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    b = omt::SymMatrix::symmetrized(m);
  }
  for (auto _ : state) {
    std::vector<omt::SymMatrix> work = base;
    omt::project_blocks_psd(work, B);
    benchmark::DoNotOptimize(work.data());
  }
}

template <Backend B>
void BM_SolveChain(benchmark::State& state) {
  const omt::LinearSystem sys = omt::reference_system("rotation");
  const std::vector<double> times = {0, 1, 2, 3, 4, 5};
  const auto ens = omt::simulate_ensemble(sys, times, 5, 0.0, 5);
  std::vector<omt::DiscreteMeasure> mus;
  for (const auto& f : ens.frames) mus.push_back(omt::DiscreteMeasure::from_points(f));
  const auto grids = omt::build_state_grids(mus, sys, omt::GridConfig{});
  const omt::ChainCosts costs(omt::make_kernels(sys, times), grids);
  omt::ChainSolverOptions opts;
  opts.backend = B;
  for (auto _ : state) {
    const auto sol = omt::solve_chain(costs, mus, grids, opts);
    benchmark::DoNotOptimize(sol.objective);
  }
}

}  // namespace

BENCHMARK(BM_LogContract<Backend::Serial>)->ArgsProduct({{256, 1024, 2048}, {0, 1}});
BENCHMARK(BM_LogContract<Backend::OpenMP>)->ArgsProduct({{256, 1024, 2048}, {0, 1}});
BENCHMARK(BM_MinPlus<Backend::Serial>)->Arg(256)->Arg(1024)->Arg(2048);
BENCHMARK(BM_MinPlus<Backend::OpenMP>)->Arg(256)->Arg(1024)->Arg(2048);
BENCHMARK(BM_ProjectBlocks<Backend::Serial>)->Arg(64)->Arg(512);
BENCHMARK(BM_ProjectBlocks<Backend::OpenMP>)->Arg(64)->Arg(512);
BENCHMARK(BM_SolveChain<Backend::Serial>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SolveChain<Backend::OpenMP>)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
