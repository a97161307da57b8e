#include "moegrad/routing.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace moegrad::routing {

namespace {
void check_jitter(double r) {
  if (!(r >= 0.0 && r < 1.0))
    throw std::invalid_argument("jitter r must lie in [0, 1), got " + std::to_string(r));
}
}  // namespace

std::size_t argmax_index(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

ad::Var router_logits(const ad::Var& w_router, const ad::Var& x) {
  if (x.value().rank() != 1)
    throw std::invalid_argument("router_logits: x must be a vector, got " + shape_string(x.shape()));
  return ad::matmul(w_router, x);
}

std::size_t jitter_argmax(std::span<const double> theta, double r, Rng& rng) {
  check_jitter(r);
  std::size_t best = 0;
  double best_score = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double score = theta[i] * rng.uniform(1.0 - r, 1.0 + r);
    if (i == 0 || score > best_score) {
      best = i;
      best_score = score;
    }
  }
  return best;
}

Mask routing_mask(std::span<const double> theta, double r) {
  check_jitter(r);
  const double top = theta[argmax_index(theta)];
  Mask mask(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i)
    mask[i] = top - theta[i] <= r * (std::abs(top) + std::abs(theta[i]));
  return mask;
}

Mask full_mask(std::size_t n) { return Mask(n, true); }

GateVector masked_gates(const ad::Var& theta, Mask mask) {
  if (theta.value().rank() != 1 || theta.value().size() != mask.size())
    throw std::invalid_argument("masked_gates: theta " + shape_string(theta.shape()) +
                                " vs mask of length " + std::to_string(mask.size()));
  bool any = false;
  for (bool b : mask) any = any || b;
  if (!any) throw std::invalid_argument("masked_gates: every expert is masked");
  auto pi = ad::masked_softmax(theta, mask);
  return GateVector{pi, std::move(mask)};
}

std::vector<double> masked_gate_values(std::span<const double> theta, const Mask& mask) {
  ad::Tape tape;
  auto t = tape.constant(Tensor::vector({theta.begin(), theta.end()}));
  auto g = masked_gates(t, mask);
  return {g.probs().begin(), g.probs().end()};
}

RoutingDecision decision_for(const GateVector& gates, std::size_t expert, SelectionMode mode) {
  const auto pi = gates.probs();
  if (expert >= pi.size()) throw std::out_of_range("expert index out of range");
  return RoutingDecision{expert, pi[expert], expert == argmax_index(pi), mode};
}

RoutingDecision sample_expert(const GateVector& gates, Rng& rng) {
  const auto pi = gates.probs();
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_live = 0;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (pi[i] <= 0.0) continue;
    last_live = i;
    cum += pi[i];
    if (u < cum) return decision_for(gates, i, SelectionMode::sampled);
  }
  // Rounding left u above the accumulated mass: fall back to the last live expert.
  return decision_for(gates, last_live, SelectionMode::sampled);
}

RoutingDecision argmax_expert(const GateVector& gates) {
  return decision_for(gates, argmax_index(gates.probs()), SelectionMode::argmax);
}

}  // namespace moegrad::routing
