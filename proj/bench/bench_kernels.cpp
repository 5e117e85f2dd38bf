// Serial vs OpenMP GEMM, and one federated round with 1 vs M worker threads.
#include <benchmark/benchmark.h>

#include "fedlora/experiments.hpp"
#include "fedlora/kernels.hpp"

using namespace fedlora;

namespace {

template <Matrix (*Kernel)(const Matrix&, kernels::Op, const Matrix&, kernels::Op)>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  RngStream rng(1, 0);
  const Matrix a = gaussian_matrix(n, n, 0, 1, rng);
  const Matrix b = gaussian_matrix(n, n, 0, 1, rng);
  for (auto _ : state) {
    Matrix c = Kernel(a, kernels::Op::kNone, b, kernels::Op::kTranspose);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}

void BM_Pf2loraRounds(benchmark::State& state) {
  RunConfig cfg = synth_defaults(Algorithm::kPf2lora, 0);
  cfg.fed.total_steps = 100;
  cfg.fed.threads = static_cast<std::size_t>(state.range(0));
  const auto data = client_data_for(cfg);
  for (auto _ : state) {
    auto logs = run_federation(cfg.fed, data);
    benchmark::DoNotOptimize(logs.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<kernels::gemm_serial>)->Name("gemm_serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_Gemm<kernels::gemm_parallel>)->Name("gemm_parallel")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_Pf2loraRounds)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
