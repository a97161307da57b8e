#include <benchmark/benchmark.h>

#include "moegrad/parallel.hpp"

using namespace moegrad;

namespace {

par::Exec exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? par::Exec::serial : par::Exec::omp;
}

void label(benchmark::State& state) {
  state.SetLabel(state.range(0) == 0 ? "serial" : "omp");
}

void BM_StgsExpectation(benchmark::State& state) {
  Rng rng(1);
  const auto inst = oracle::random_instance(rng, 8, 4, oracle::DownstreamFamily::cubic);
  for (auto _ : state)
    benchmark::DoNotOptimize(par::stgs_expectation(inst, 1.0, 100000, 7, exec_of(state)));
  label(state);
}
BENCHMARK(BM_StgsExpectation)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_OrderStudies(benchmark::State& state) {
  Rng rng(2);
  std::vector<oracle::SmallInstance> insts;
  for (int i = 0; i < 64; ++i) insts.push_back(oracle::random_instance(rng, 8, 4, oracle::DownstreamFamily::tanh));
  auto cfg = estimators::EstimatorConfig::defaults_for(estimators::Kind::sparsemixer2);
  cfg.nabla1_path = estimators::Nabla1Path::none;
  const std::vector<double> eps{0.1, 0.05, 0.025};
  for (auto _ : state) benchmark::DoNotOptimize(par::order_studies(insts, cfg, eps, exec_of(state)));
  label(state);
}
BENCHMARK(BM_OrderStudies)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_JitterSupport(benchmark::State& state) {
  Rng rng(3);
  std::vector<std::vector<double>> thetas(100, std::vector<double>(8));
  for (auto& t : thetas)
    for (auto& v : t) v = rng.normal();
  for (auto _ : state)
    benchmark::DoNotOptimize(par::jitter_support(thetas, 0.1, 10000, 4, exec_of(state)));
  label(state);
}
BENCHMARK(BM_JitterSupport)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
