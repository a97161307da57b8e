#include "moegrad/parallel.hpp"

#include <omp.h>

#include <algorithm>
#include <stdexcept>
#include <string>

#include "moegrad/routing.hpp"

namespace moegrad::par {

int max_threads() { return omp_get_max_threads(); }

void set_threads(int jobs) {
  if (jobs > 0) omp_set_num_threads(jobs);
}

void for_each_index(std::size_t n, const std::function<void(std::size_t)>& body, Exec exec) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
}

oracle::GradReport stgs_expectation(const oracle::SmallInstance& inst, double tau,
                                    std::size_t mc_samples, std::uint64_t seed, Exec exec) {
  inst.validate();
  if (mc_samples < oracle::kMinStgsSamples)
    throw std::invalid_argument("stgs expectation needs at least " +
                                std::to_string(oracle::kMinStgsSamples) + " Monte Carlo samples");
  const std::size_t chunks = (mc_samples + oracle::kMcChunk - 1) / oracle::kMcChunk;
  std::vector<oracle::McPartial> parts(chunks);
  for_each_index(
      chunks,
      [&](std::size_t c) {
        const std::size_t count = std::min(oracle::kMcChunk, mc_samples - c * oracle::kMcChunk);
        parts[c] = oracle::stgs_chunk(inst, tau, seed, c, count);
      },
      exec);
  return oracle::finish_mc_report(inst, parts);
}

std::vector<oracle::OrderStudyResult> order_studies(std::span<const oracle::SmallInstance> insts,
                                                    const estimators::EstimatorConfig& config,
                                                    std::span<const double> epsilons, Exec exec) {
  std::vector<oracle::OrderStudyResult> out(insts.size());
  for_each_index(
      insts.size(),
      [&](std::size_t i) { out[i] = oracle::bias_order_study(insts[i], config, epsilons); }, exec);
  return out;
}

JitterSupportResult jitter_support(std::span<const std::vector<double>> thetas, double r,
                                   std::size_t draws_per_theta, std::uint64_t seed, Exec exec) {
  std::vector<std::size_t> bad(thetas.size(), 0);
  for_each_index(
      thetas.size(),
      [&](std::size_t t) {
        const auto mask = routing::routing_mask(thetas[t], r);
        Rng rng(seed, t);
        std::size_t v = 0;
        for (std::size_t k = 0; k < draws_per_theta; ++k)
          if (!mask[routing::jitter_argmax(thetas[t], r, rng)]) ++v;
        bad[t] = v;
      },
      exec);
  JitterSupportResult res;
  res.draws = thetas.size() * draws_per_theta;
  for (auto v : bad) res.violations += v;
  return res;
}

}  // namespace moegrad::par
