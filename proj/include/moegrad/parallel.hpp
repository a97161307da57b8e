#pragma once

// OpenMP kernels for the embarrassingly parallel studies, each with a serial
// reference path. Work is split into units that own their RNG stream and are
// reduced in a fixed order, so both paths return bit-identical results.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moegrad/estimators.hpp"
#include "moegrad/oracle.hpp"

namespace moegrad::par {

enum class Exec { serial, omp };

/// Worker threads the omp path will use (1 when built without OpenMP).
int max_threads();
/// jobs <= 0 leaves the OpenMP default untouched.
void set_threads(int jobs);

/// Runs body(i) for i in [0, n); the omp path uses dynamic scheduling.
void for_each_index(std::size_t n, const std::function<void(std::size_t)>& body, Exec exec);

/// STGS expectation over Gumbel draws, chunked as in oracle::stgs_chunk.
oracle::GradReport stgs_expectation(const oracle::SmallInstance& inst, double tau,
                                    std::size_t mc_samples, std::uint64_t seed, Exec exec);

/// One bias_order_study per instance, in input order.
std::vector<oracle::OrderStudyResult> order_studies(std::span<const oracle::SmallInstance> insts,
                                                    const estimators::EstimatorConfig& config,
                                                    std::span<const double> epsilons, Exec exec);

struct JitterSupportResult {
  std::size_t draws = 0;
  std::size_t violations = 0;  // draws that picked an expert outside the mask
};

/// draws_per_theta jitter_argmax draws for every theta row, each row on stream (seed, row).
JitterSupportResult jitter_support(std::span<const std::vector<double>> thetas, double r,
                                   std::size_t draws_per_theta, std::uint64_t seed, Exec exec);

}  // namespace moegrad::par
