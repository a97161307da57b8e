#pragma once

// Routing-gradient estimators for a top-1 MoE layer.
//
// Every estimator shares the same sampled forward y = pi_D f_D(x) (halved on
// the mid-point branch) and differs only in what reaches the router logits on
// the backward pass. Sparse kinds are expressed as gradient scaling on the
// gate multiplier; ST/STGS use a straight-through surrogate over all experts.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moegrad/autodiff.hpp"
#include "moegrad/routing.hpp"

namespace moegrad::estimators {

enum class Kind { neglect, reinforce, st, stgs, sparsemixer1, sparsemixer2, sparsemixer };

/// standard: the estimator's grad0 term is added to the ordinary multiplier-path
/// gradient (grad1). none: only the grad0 estimate reaches the router.
enum class Nabla1Path { standard, none };

inline constexpr Kind kAllKinds[] = {Kind::neglect,      Kind::reinforce,    Kind::st,
                                     Kind::stgs,         Kind::sparsemixer1, Kind::sparsemixer2,
                                     Kind::sparsemixer};

std::string_view kind_name(Kind kind);
std::optional<Kind> parse_kind(std::string_view name);
std::string_view nabla1_name(Nabla1Path path);
std::optional<Nabla1Path> parse_nabla1(std::string_view name);

/// Dense kinds evaluate every expert per token.
constexpr bool is_dense(Kind kind) { return kind == Kind::st || kind == Kind::stgs; }

struct EstimatorConfig {
  Kind kind = Kind::sparsemixer;
  bool use_mask = true;
  bool use_omega = true;
  bool scale_gate = true;
  Nabla1Path nabla1_path = Nabla1Path::standard;
  double tau = 1.0;
  double r = routing::kDefaultJitter;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Kind plus a suffix for every flag that differs from the kind's defaults.
  std::string label() const;

  static EstimatorConfig defaults_for(Kind kind);
};

/// All expert outputs for one token plus the Gumbel draws used by STGS.
struct DenseRoutingContext {
  std::vector<Tensor> expert_outputs;
  std::vector<double> gumbel;

  bool populated() const { return !expert_outputs.empty(); }
};

std::vector<double> draw_gumbel(std::size_t n, Rng& rng);
/// argmax_i (theta_i + G_i), lowest index on ties.
std::size_t gumbel_argmax(std::span<const double> theta, std::span<const double> gumbel);
/// softmax((theta + G) / tau).
std::vector<double> tempered_softmax(std::span<const double> theta, std::span<const double> gumbel,
                                     double tau);

// ---- tape contracts (sparse kinds) --------------------------------------

ad::Var route_output_neglect(const routing::GateVector& gates,
                             const routing::RoutingDecision& decision, const ad::Var& expert_out,
                             Nabla1Path path = Nabla1Path::standard);
ad::Var route_output_sparsemixer1(const routing::GateVector& gates,
                                  const routing::RoutingDecision& decision,
                                  const ad::Var& expert_out,
                                  Nabla1Path path = Nabla1Path::standard);
ad::Var route_output_sparsemixer2(const routing::GateVector& gates,
                                  const routing::RoutingDecision& decision,
                                  const ad::Var& expert_out,
                                  Nabla1Path path = Nabla1Path::standard);
ad::Var route_output_sparsemixer(const routing::GateVector& gates,
                                 const routing::RoutingDecision& decision,
                                 const ad::Var& expert_out,
                                 Nabla1Path path = Nabla1Path::standard);

/// Dispatch for the sparse kinds (reinforce shares the neglect forward; its
/// score-function term is added separately by reinforce_surrogate).
ad::Var route_output(const EstimatorConfig& config, const routing::GateVector& gates,
                     const routing::RoutingDecision& decision, const ad::Var& expert_out);

/// Zero-valued term whose gradient is stop(loss) * d log pi_D / d theta.
ad::Var reinforce_surrogate(const ad::Var& token_loss, const routing::GateVector& gates,
                            const routing::RoutingDecision& decision);

/// Straight-through output over all experts: y = sum_i Dst_i pi_i f_i with
/// Dst = onehot(D) + R - stop(R); R = pi for ST, softmax((theta+G)/tau) for STGS.
ad::Var route_output_dense(const EstimatorConfig& config, const ad::Var& theta,
                           const routing::GateVector& gates,
                           const routing::RoutingDecision& decision,
                           std::span<const ad::Var> expert_outputs,
                           std::span<const double> gumbel = {});

/// omega (.) y; omega has the shape of y.
ad::Var apply_omega(const ad::Var& y, const ad::Var& omega);
/// omega_D * y for a per-expert scale vector.
ad::Var apply_omega_per_expert(const ad::Var& y, const ad::Var& omega, std::size_t expert);

// ---- value contracts: gradient with respect to the router logits ---------

/// loss * (e_D - pi), zero on masked coordinates.
std::vector<double> grad_reinforce(double loss_value, std::span<const double> pi,
                                   const routing::Mask& mask, std::size_t expert);

/// sum_i <upstream, pi_i f_i> d pi_i / d theta.
std::vector<double> grad_st(const DenseRoutingContext& ctx, std::span<const double> pi,
                            std::span<const double> upstream);

/// sum_i <upstream, pi_i f_i> d S_tau,i / d theta with S_tau = softmax((theta+G)/tau).
std::vector<double> grad_stgs(const DenseRoutingContext& ctx, std::span<const double> theta,
                              double tau, std::span<const double> upstream);

}  // namespace moegrad::estimators
