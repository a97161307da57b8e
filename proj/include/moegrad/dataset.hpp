#pragma once

#include <cstdint>
#include <span>

#include "moegrad/config.hpp"
#include "moegrad/tensor.hpp"

namespace moegrad::harness {

/// Piecewise task: [-1, 1]^d is split into Voronoi regions around random
/// centres and each region has its own random smooth map
/// t(x) = A tanh(B x + b) + c. Classification targets are one-hot rows of
/// argmax t(x) (noise added before the argmax).
struct Dataset {
  Tensor train_x, train_y;
  Tensor eval_x, eval_y;
};

Dataset gen_synthetic(const TaskSpec& spec, std::size_t d_model, std::size_t num_regions,
                      std::size_t d_out, std::uint64_t seed);

/// Region index of each row, exposed for tests.
std::size_t region_of(const Tensor& centres, std::span<const double> x);

}  // namespace moegrad::harness
