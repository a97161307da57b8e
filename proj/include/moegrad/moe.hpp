#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moegrad/autodiff.hpp"
#include "moegrad/estimators.hpp"
#include "moegrad/rng.hpp"
#include "moegrad/routing.hpp"

namespace moegrad::moe {

enum class Activation { tanh, relu };
enum class OmegaMode { per_dimension, per_expert };
enum class Mode { train, infer };

/// One expert: f(x) = V act(U x), U is d_hidden x d, V is d x d_hidden.
struct ExpertParams {
  Tensor u;
  Tensor v;
};

struct MoELayer {
  Tensor w_router;  // N x d
  std::vector<ExpertParams> experts;
  Tensor omega;     // d (per_dimension) or N (per_expert); starts at ones
  estimators::EstimatorConfig config;
  Activation activation = Activation::tanh;
  OmegaMode omega_mode = OmegaMode::per_dimension;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t d_model() const { return w_router.cols(); }
  std::size_t d_hidden() const { return experts.front().u.rows(); }

  void validate() const;

  static MoELayer init(std::size_t num_experts, std::size_t d_model, std::size_t d_hidden,
                       const estimators::EstimatorConfig& config, Rng& rng,
                       double router_scale = 0.0);
};

/// Layer parameters recorded as leaves on a tape.
struct LayerVars {
  ad::Var w_router;
  std::vector<ad::Var> u;
  std::vector<ad::Var> v;
  ad::Var omega;
};

LayerVars bind(ad::Tape& tape, const MoELayer& layer, bool requires_grad = true);

struct RoutingRecord {
  std::vector<routing::RoutingDecision> decisions;
  std::vector<ad::Var> gate_probs;     // per token pi vector (masked), on the forward tape
  std::vector<std::size_t> load;       // tokens routed to each expert
  std::vector<double> gate_mass;       // running sum of pi per expert
  std::size_t expert_calls = 0;

  explicit RoutingRecord(std::size_t num_experts = 0)
      : load(num_experts, 0), gate_mass(num_experts, 0.0) {}
  std::size_t tokens() const { return decisions.size(); }
  std::vector<double> mean_gate_mass() const;
  double max_load_fraction() const;
};

/// Per-token forward products needed by estimators that act after the downstream loss.
struct TokenRouting {
  ad::Var y;
  ad::Var theta;
  routing::GateVector gates;
  routing::RoutingDecision decision;
};

ad::Var expert_forward(const ad::Var& u, const ad::Var& v, const ad::Var& x,
                       Activation act = Activation::tanh);
Tensor expert_forward(const ExpertParams& params, const Tensor& x,
                      Activation act = Activation::tanh);

TokenRouting moe_forward_token(const MoELayer& layer, const LayerVars& vars, const ad::Var& x,
                               Mode mode, Rng& rng, RoutingRecord& record);

/// Value-level forward of a single token.
Tensor moe_forward(const MoELayer& layer, const Tensor& x, Mode mode, Rng& rng,
                   RoutingRecord* record = nullptr);

/// N * sum_i (fraction routed to i) * (mean gate of i); differentiable through the gates.
ad::Var load_balance_loss(const RoutingRecord& record, std::size_t num_experts);
double load_balance_value(std::span<const std::size_t> load, std::span<const double> mean_gate);

/// Fold omega into each expert's output projection; outputs are unchanged.
MoELayer fold_omega(const MoELayer& layer);

// ---- small network: residual MoE block followed by a linear readout -------

enum class TaskKind { regression, classification };

struct Network {
  MoELayer moe;
  Tensor w_out;  // d_out x d
  Tensor b_out;  // d_out

  static Network init(std::size_t num_experts, std::size_t d_model, std::size_t d_hidden,
                      std::size_t d_out, const estimators::EstimatorConfig& config, Rng& rng);
};

struct NetworkVars {
  LayerVars moe;
  ad::Var w_out;
  ad::Var b_out;
};

NetworkVars bind(ad::Tape& tape, const Network& net, bool requires_grad = true);

struct BatchObjective {
  ad::Var objective;      // task + lb_coef * lb (+ zero-valued estimator surrogates)
  double task_loss = 0.0;
  double lb_loss = 0.0;
  RoutingRecord record;
};

/// Mean task loss over the given rows. Classification targets are one-hot rows.
BatchObjective batch_objective(const Network& net, const NetworkVars& vars, ad::Tape& tape,
                               const Tensor& inputs, const Tensor& targets,
                               std::span<const std::size_t> rows, TaskKind task, Mode mode,
                               double lb_coef, Rng& rng);

/// Mean task loss in inference mode; consumes no randomness.
double evaluate_loss(const Network& net, const Tensor& inputs, const Tensor& targets,
                     TaskKind task);

}  // namespace moegrad::moe
