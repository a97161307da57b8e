#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "moegrad/estimators.hpp"
#include "moegrad/moe.hpp"
#include "moegrad/oracle.hpp"

namespace moegrad::harness {

/// Rejected configuration; `path()` names the offending key (e.g. "estimator.kind").
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct TaskSpec {
  moe::TaskKind kind = moe::TaskKind::regression;
  std::size_t n_train = 512;
  std::size_t n_eval = 256;
  double noise_std = 0.0;
  std::size_t num_regions = 0;  // 0: one region per expert
  std::size_t d_out = 0;        // 0: 1 for regression, num_regions for classification
};

enum class OptimizerKind { sgd, adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct StudySpec {
  std::vector<double> epsilons = {0.1, 0.05, 0.025};
  std::size_t instances = 20;
  oracle::DownstreamFamily downstream = oracle::DownstreamFamily::cubic;
  std::size_t mc_samples = 100'000;
  bool reference_instance = false;  // biasvar on the two-expert reference instance
  std::vector<estimators::Kind> order_kinds = {estimators::Kind::sparsemixer1,
                                               estimators::Kind::sparsemixer2,
                                               estimators::Kind::st};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t num_experts = 0;
  std::size_t d_model = 0;
  std::size_t d_hidden = 0;  // 0: 2 * d_model
  /// One or more estimator variants; train runs each of them for every replica.
  std::vector<estimators::EstimatorConfig> estimators;
  double jitter_r = routing::kDefaultJitter;
  double load_balance_coef = 0.01;
  TaskSpec task;
  std::size_t steps = 200;
  std::size_t batch_size = 32;
  OptimizerSpec optimizer;
  double learning_rate = 1e-2;
  std::size_t replicas = 1;
  std::size_t log_every = 10;
  moe::Activation expert_activation = moe::Activation::tanh;
  moe::OmegaMode omega_mode = moe::OmegaMode::per_dimension;
  StudySpec study;

  /// Notes for accepted-but-unusual settings (e.g. N outside the usual sweep).
  std::vector<std::string> notes;

  std::size_t hidden() const { return d_hidden ? d_hidden : 2 * d_model; }
  std::size_t regions() const { return task.num_regions ? task.num_regions : num_experts; }
  std::size_t output_dim() const;
};

/// Strict parse: unknown keys, wrong types and constraint violations throw ConfigError.
ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig parse_config(const std::filesystem::path& path);

}  // namespace moegrad::harness
