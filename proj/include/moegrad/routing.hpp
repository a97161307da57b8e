#pragma once

// Router for top-1 expert selection: logits, the jitter mask, the masked
// softmax gates and the two selection rules (sampled for training, argmax for
// inference). Ties always resolve to the lowest index.

#include <cstddef>
#include <span>
#include <vector>

#include "moegrad/autodiff.hpp"
#include "moegrad/rng.hpp"

namespace moegrad::routing {

using Mask = std::vector<bool>;

inline constexpr double kDefaultJitter = 0.1;

struct GateVector {
  ad::Var pi;  // masked softmax, differentiable in theta
  Mask mask;   // constant under differentiation

  std::span<const double> probs() const { return pi.value().values(); }
  std::size_t size() const { return mask.size(); }
};

enum class SelectionMode { sampled, argmax };

struct RoutingDecision {
  std::size_t expert = 0;
  double gate = 0.0;
  bool is_argmax = false;
  SelectionMode mode = SelectionMode::sampled;
};

/// Lowest index attaining the maximum.
std::size_t argmax_index(std::span<const double> values);

/// theta = W_r x for W_r of shape N x d and x of length d.
ad::Var router_logits(const ad::Var& w_router, const ad::Var& x);

/// Switch-style selection: argmax_i theta_i * u_i with u_i ~ Uniform(1 - r, 1 + r).
std::size_t jitter_argmax(std::span<const double> theta, double r, Rng& rng);

/// Experts reachable under jitter r: theta* - theta_i <= r (|theta*| + |theta_i|).
Mask routing_mask(std::span<const double> theta, double r);
Mask full_mask(std::size_t n);

GateVector masked_gates(const ad::Var& theta, Mask mask);

/// Value-only masked softmax (no tape required by the caller).
std::vector<double> masked_gate_values(std::span<const double> theta, const Mask& mask);

RoutingDecision sample_expert(const GateVector& gates, Rng& rng);
RoutingDecision argmax_expert(const GateVector& gates);
/// Decision record for an expert chosen by some other rule (e.g. jitter_argmax).
RoutingDecision decision_for(const GateVector& gates, std::size_t expert, SelectionMode mode);

}  // namespace moegrad::routing
