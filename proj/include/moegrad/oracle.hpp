#pragma once

// Brute-force ground truth for small routing problems.
//
// Everything here works on plain doubles with closed-form derivatives and
// never touches the autodiff tape, so it can check the tape-based estimators
// independently. The objective is L(theta) = sum_D pi_D g(pi_D f_D) and all
// gradients are with respect to the router logits theta.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moegrad/estimators.hpp"
#include "moegrad/rng.hpp"
#include "moegrad/routing.hpp"

namespace moegrad::oracle {

inline constexpr std::size_t kMaxExperts = 16;
inline constexpr std::size_t kMinStgsSamples = 10'000;

/// Smooth downstream map g: R^d -> R with analytic gradient.
/// Either a per-component cubic polynomial or a per-component tanh readout.
class Downstream {
 public:
  static Downstream polynomial(double offset, std::vector<double> linear,
                               std::vector<double> quadratic, std::vector<double> cubic);
  static Downstream tanh_readout(double offset, std::vector<double> weight,
                                 std::vector<double> slope, std::vector<double> shift);
  /// g(y) = sum_k y_k^2.
  static Downstream squared_norm(std::size_t dim);
  static Downstream constant(double c, std::size_t dim);

  double value(std::span<const double> y) const;
  std::vector<double> grad(std::span<const double> y) const;
  std::size_t dim() const { return a_.size(); }

 private:
  enum class Form { polynomial, tanh };
  Form form_ = Form::polynomial;
  double offset_ = 0.0;
  // polynomial: a y + b y^2 + c y^3; tanh: a tanh(b y + c)
  std::vector<double> a_, b_, c_;
};

enum class DownstreamFamily { quadratic, cubic, tanh };

struct SmallInstance {
  std::vector<double> theta;
  routing::Mask mask;                        // empty: every expert live
  std::vector<std::vector<double>> experts;  // f_i(x), one row per expert
  Downstream g;

  std::size_t num_experts() const { return theta.size(); }
  std::size_t dim() const { return experts.empty() ? 0 : experts.front().size(); }
  bool live(std::size_t i) const { return mask.empty() || mask[i]; }
  /// Rejects N outside [2, kMaxExperts] and inconsistent shapes.
  void validate() const;
  /// Same instance with every expert output multiplied by eps.
  SmallInstance scaled(double eps) const;
};

/// N = 2, theta = (0, 0), scalar experts (1, 2), g(y) = y^2.
SmallInstance reference_instance();
SmallInstance random_instance(Rng& rng, std::size_t num_experts, std::size_t dim,
                              DownstreamFamily family);

std::vector<double> gate_probs(const SmallInstance& inst);
/// J[i][k] = d pi_i / d theta_k.
std::vector<std::vector<double>> gate_jacobian(const SmallInstance& inst);

double exact_loss(const SmallInstance& inst);

struct Decomposition {
  std::vector<double> nabla0;
  std::vector<double> nabla1;
};
Decomposition exact_grad_decomposed(const SmallInstance& inst);

/// Max deviation from grad0 of the mean-baseline and zero-baseline rewrites.
struct BaselineResiduals {
  double mean_baseline = 0.0;
  double zero_baseline = 0.0;
};
BaselineResiduals baseline_identity_check(const SmallInstance& inst);

/// grad0 estimate of one estimator for a fixed sampled expert (enumerable kinds only).
std::vector<double> per_sample_grad0(const SmallInstance& inst,
                                     const estimators::EstimatorConfig& config,
                                     std::size_t expert);

/// One STGS Monte Carlo draw: returns the grad0 estimate for Gumbel noise `gumbel`.
std::vector<double> stgs_sample_grad0(const SmallInstance& inst, double tau,
                                      std::span<const double> gumbel);

struct GradReport {
  std::vector<double> nabla0;
  std::vector<double> nabla1;
  std::vector<double> estimator_expectation;
  double bias_l2 = 0.0;
  double rel_bias = 0.0;
  double variance_trace = 0.0;
  std::size_t n_samples = 0;  // 0 for exact enumeration
};

/// Chunked Monte Carlo accumulator: chunk c draws from Rng(seed, c), so the
/// result does not depend on how chunks are scheduled.
struct McPartial {
  std::vector<double> sum;
  double sum_sq_norm = 0.0;
  std::size_t count = 0;
};
inline constexpr std::size_t kMcChunk = 1024;
McPartial stgs_chunk(const SmallInstance& inst, double tau, std::uint64_t seed, std::size_t chunk,
                     std::size_t count);
GradReport finish_mc_report(const SmallInstance& inst, std::span<const McPartial> partials);

GradReport estimator_expectation(const SmallInstance& inst,
                                 const estimators::EstimatorConfig& config,
                                 std::size_t mc_samples = 0, std::uint64_t seed = 0);

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& loss,
                                     std::span<const double> params, double h);

struct OrderStudyResult {
  std::vector<double> epsilons;
  std::vector<double> bias_norms;
  std::vector<std::optional<double>> ratios;  // bias(eps_k) / bias(eps_{k+1}); nullopt if exact
};

OrderStudyResult bias_order_study(const SmallInstance& base,
                                  const estimators::EstimatorConfig& config,
                                  std::span<const double> epsilons);

enum class OdeMethod { euler_endpoint, midpoint };

struct ScalarFunction {
  std::string name;
  std::function<double(double)> value;
  std::function<double(double)> derivative;
};

/// x^2, x^3, tanh, exp.
std::vector<ScalarFunction> builtin_functions();

/// |g(t1) - g(t0) - g'(s)(t1 - t0)| with s = t1 (endpoint Euler) or (t0+t1)/2.
double ode_solver_error(const ScalarFunction& g, double t0, double t1, OdeMethod method);

std::string_view ode_method_name(OdeMethod m);

double l2_norm(std::span<const double> v);
double l2_distance(std::span<const double> a, std::span<const double> b);

}  // namespace moegrad::oracle
