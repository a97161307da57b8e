#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "moegrad/config.hpp"
#include "moegrad/dataset.hpp"
#include "moegrad/moe.hpp"
#include "moegrad/parallel.hpp"

namespace moegrad::harness {

// ---- optimizers -------------------------------------------------------------

class Optimizer {
 public:
  Optimizer(const OptimizerSpec& spec, double learning_rate);
  /// params[k] -= update(grads[k]); state is keyed by position.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

 private:
  OptimizerSpec spec_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Trainable tensors of a network in a fixed order; omega only when it is used.
std::vector<Tensor*> parameters(moe::Network& net);
std::vector<ad::Var> parameter_vars(const moe::NetworkVars& vars, const moe::Network& net);

// ---- training ---------------------------------------------------------------

struct MetricsRow {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::string estimator;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double lb_loss = 0.0;
  double step_time_ms = 0.0;
  double max_expert_load_fraction = 0.0;
};

struct ReplicaRun {
  std::string estimator;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  std::vector<double> step_times_ms;  // one per parameter update
  std::size_t expert_calls = 0;       // training forwards only
  std::size_t routed_tokens = 0;
  bool diverged = false;
};

struct TrainResult {
  std::vector<ReplicaRun> runs;
  bool diverged() const;
  /// All rows sorted by (estimator, seed, step).
  std::vector<MetricsRow> sorted_rows() const;
};

/// Seeds: dataset (seed, 0..2), init (seed, 10), routing noise (seed, 11), batches (seed, 12).
ReplicaRun train_replica(const ExperimentConfig& config,
                         const estimators::EstimatorConfig& estimator, std::uint64_t seed);

/// Every estimator x replica; replica i uses seed + i.
TrainResult run_train(const ExperimentConfig& config, par::Exec exec);

// ---- oracle studies ---------------------------------------------------------

struct BiasVarRow {
  std::string estimator;
  double bias_l2 = 0.0;
  double rel_bias = 0.0;
  double variance_trace = 0.0;
  std::size_t n_samples = 0;  // 0: exact enumeration
};

struct OrderRow {
  std::string estimator;
  double epsilon = 0.0;
  double bias_l2 = 0.0;          // median over instances
  std::optional<double> ratio;   // median of bias(eps) / bias(next eps)
};

struct OdeRow {
  std::string method;
  std::string function;
  double h = 0.0;
  double error = 0.0;
  std::optional<double> ratio;  // error(previous h) / error(h)
};

/// Oracle instance the studies run on.
oracle::SmallInstance study_instance(const ExperimentConfig& config);
std::vector<oracle::SmallInstance> study_instances(const ExperimentConfig& config);

std::vector<BiasVarRow> run_biasvar(const ExperimentConfig& config, par::Exec exec);
std::vector<OrderRow> run_order_study(const ExperimentConfig& config, par::Exec exec);
/// Single-step errors on [0.5, 0.5 + h] for h = 1e-2, 5e-3, 2.5e-3.
std::vector<OdeRow> run_ode_check();

// ---- CSV --------------------------------------------------------------------

void write_csv(std::ostream& os, std::span<const MetricsRow> rows);
void write_csv(std::ostream& os, std::span<const BiasVarRow> rows);
void write_csv(std::ostream& os, std::span<const OrderRow> rows);
void write_csv(std::ostream& os, std::span<const OdeRow> rows);

double median(std::vector<double> values);

}  // namespace moegrad::harness
