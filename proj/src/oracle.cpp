#include "moegrad/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace moegrad::oracle {

using estimators::Kind;

// ---- downstream maps ------------------------------------------------------

Downstream Downstream::polynomial(double offset, std::vector<double> linear,
                                  std::vector<double> quadratic, std::vector<double> cubic) {
  if (linear.size() != quadratic.size() || linear.size() != cubic.size())
    throw std::invalid_argument("polynomial downstream: coefficient lengths differ");
  Downstream g;
  g.form_ = Form::polynomial;
  g.offset_ = offset;
  g.a_ = std::move(linear);
  g.b_ = std::move(quadratic);
  g.c_ = std::move(cubic);
  return g;
}

Downstream Downstream::tanh_readout(double offset, std::vector<double> weight,
                                    std::vector<double> slope, std::vector<double> shift) {
  if (weight.size() != slope.size() || weight.size() != shift.size())
    throw std::invalid_argument("tanh downstream: coefficient lengths differ");
  Downstream g;
  g.form_ = Form::tanh;
  g.offset_ = offset;
  g.a_ = std::move(weight);
  g.b_ = std::move(slope);
  g.c_ = std::move(shift);
  return g;
}

Downstream Downstream::squared_norm(std::size_t dim) {
  return polynomial(0.0, std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0),
                    std::vector<double>(dim, 0.0));
}

Downstream Downstream::constant(double c, std::size_t dim) {
  const std::vector<double> z(dim, 0.0);
  return polynomial(c, z, z, z);
}

double Downstream::value(std::span<const double> y) const {
  double s = offset_;
  for (std::size_t k = 0; k < a_.size(); ++k) {
    if (form_ == Form::polynomial)
      s += y[k] * (a_[k] + y[k] * (b_[k] + y[k] * c_[k]));
    else
      s += a_[k] * std::tanh(b_[k] * y[k] + c_[k]);
  }
  return s;
}

std::vector<double> Downstream::grad(std::span<const double> y) const {
  std::vector<double> g(a_.size());
  for (std::size_t k = 0; k < a_.size(); ++k) {
    if (form_ == Form::polynomial) {
      g[k] = a_[k] + y[k] * (2.0 * b_[k] + 3.0 * c_[k] * y[k]);
    } else {
      const double t = std::tanh(b_[k] * y[k] + c_[k]);
      g[k] = a_[k] * b_[k] * (1.0 - t * t);
    }
  }
  return g;
}

// ---- instances ------------------------------------------------------------

void SmallInstance::validate() const {
  const std::size_t n = theta.size();
  if (n < 2 || n > kMaxExperts)
    throw std::invalid_argument("oracle instance needs 2 <= N <= " + std::to_string(kMaxExperts) +
                                ", got N = " + std::to_string(n));
  if (experts.size() != n) throw std::invalid_argument("oracle instance: expert count != N");
  for (const auto& f : experts)
    if (f.size() != g.dim()) throw std::invalid_argument("oracle instance: expert dim != g dim");
  if (!mask.empty()) {
    if (mask.size() != n) throw std::invalid_argument("oracle instance: mask length != N");
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
      throw std::invalid_argument("oracle instance: every expert masked");
  }
}

SmallInstance SmallInstance::scaled(double eps) const {
  SmallInstance out = *this;
  for (auto& f : out.experts)
    for (auto& v : f) v *= eps;
  return out;
}

SmallInstance reference_instance() {
  return SmallInstance{{0.0, 0.0}, {}, {{1.0}, {2.0}}, Downstream::squared_norm(1)};
}

SmallInstance random_instance(Rng& rng, std::size_t num_experts, std::size_t dim,
                              DownstreamFamily family) {
  SmallInstance inst;
  inst.theta.resize(num_experts);
  for (auto& t : inst.theta) t = rng.normal();
  inst.experts.assign(num_experts, std::vector<double>(dim));
  for (auto& f : inst.experts)
    for (auto& v : f) v = rng.normal();
  auto signed_uniform = [&](double lo, double hi) {
    const double m = rng.uniform(lo, hi);
    return rng.uniform() < 0.5 ? -m : m;
  };
  const double offset = rng.normal();
  std::vector<double> a(dim), b(dim), c(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    if (family == DownstreamFamily::tanh) {
      a[k] = signed_uniform(0.5, 1.5);
      b[k] = rng.uniform(0.5, 1.5);
      c[k] = signed_uniform(0.3, 1.0);
    } else {
      a[k] = rng.normal();
      b[k] = signed_uniform(0.5, 1.5);
      c[k] = family == DownstreamFamily::cubic ? rng.uniform(-1.0, 1.0) : 0.0;
    }
  }
  inst.g = family == DownstreamFamily::tanh ? Downstream::tanh_readout(offset, a, b, c)
                                            : Downstream::polynomial(offset, a, b, c);
  return inst;
}

// ---- exact quantities -----------------------------------------------------

std::vector<double> gate_probs(const SmallInstance& inst) {
  const std::size_t n = inst.num_experts();
  double top = -HUGE_VAL;
  for (std::size_t i = 0; i < n; ++i)
    if (inst.live(i)) top = std::max(top, inst.theta[i]);
  std::vector<double> p(n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (inst.live(i)) z += (p[i] = std::exp(inst.theta[i] - top));
  for (auto& v : p) v /= z;
  return p;
}

std::vector<std::vector<double>> gate_jacobian(const SmallInstance& inst) {
  const auto p = gate_probs(inst);
  const std::size_t n = p.size();
  std::vector<std::vector<double>> j(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) j[i][k] = p[i] * ((i == k ? 1.0 : 0.0) - p[k]);
  return j;
}

namespace {

std::vector<double> gated(const SmallInstance& inst, const std::vector<double>& p, std::size_t i,
                          double extra = 1.0) {
  std::vector<double> a = inst.experts[i];
  for (auto& v : a) v *= p[i] * extra;
  return a;
}

double inner(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

void axpy(std::vector<double>& y, double alpha, std::span<const double> x) {
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += alpha * x[k];
}

}  // namespace

double exact_loss(const SmallInstance& inst) {
  inst.validate();
  const auto p = gate_probs(inst);
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (inst.live(i)) loss += p[i] * inst.g.value(gated(inst, p, i));
  return loss;
}

Decomposition exact_grad_decomposed(const SmallInstance& inst) {
  inst.validate();
  const auto p = gate_probs(inst);
  const auto jac = gate_jacobian(inst);
  const std::size_t n = p.size();
  Decomposition d{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    if (!inst.live(i)) continue;
    const auto a = gated(inst, p, i);
    axpy(d.nabla0, inst.g.value(a), jac[i]);
    // d g(pi_i f_i) / d theta = <g'(a_i), f_i> d pi_i / d theta
    axpy(d.nabla1, p[i] * inner(inst.g.grad(a), inst.experts[i]), jac[i]);
  }
  return d;
}

BaselineResiduals baseline_identity_check(const SmallInstance& inst) {
  const auto p = gate_probs(inst);
  const auto jac = gate_jacobian(inst);
  const auto exact = exact_grad_decomposed(inst).nabla0;
  const std::size_t n = p.size();
  std::vector<double> gv(n, 0.0);
  double mean_g = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!inst.live(i)) continue;
    gv[i] = inst.g.value(gated(inst, p, i));
    mean_g += p[i] * gv[i];
  }
  const double g0 = inst.g.value(std::vector<double>(inst.dim(), 0.0));
  std::vector<double> mean_form(n, 0.0), zero_form(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!inst.live(i)) continue;
    axpy(mean_form, gv[i] - mean_g, jac[i]);
    axpy(zero_form, gv[i] - g0, jac[i]);
  }
  BaselineResiduals r;
  for (std::size_t k = 0; k < n; ++k) {
    r.mean_baseline = std::max(r.mean_baseline, std::abs(mean_form[k] - exact[k]));
    r.zero_baseline = std::max(r.zero_baseline, std::abs(zero_form[k] - exact[k]));
  }
  return r;
}

// ---- estimators by enumeration -------------------------------------------

std::vector<double> per_sample_grad0(const SmallInstance& inst,
                                     const estimators::EstimatorConfig& config,
                                     std::size_t expert) {
  const auto p = gate_probs(inst);
  const auto jac = gate_jacobian(inst);
  const std::size_t n = p.size();
  std::vector<double> est(n, 0.0);
  if (!inst.live(expert)) throw std::invalid_argument("per_sample_grad0: masked expert");
  const auto a = gated(inst, p, expert);
  const auto& f = inst.experts[expert];

  Kind kind = config.kind;
  if (kind == Kind::sparsemixer) {
    const auto top = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    kind = expert == top ? Kind::sparsemixer1 : Kind::sparsemixer2;
  }
  switch (kind) {
    case Kind::neglect:
      break;
    case Kind::reinforce: {
      const double gval = inst.g.value(a);
      for (std::size_t k = 0; k < n; ++k)
        if (inst.live(k)) est[k] = gval * ((k == expert ? 1.0 : 0.0) - p[k]);
      break;
    }
    case Kind::sparsemixer1:
      axpy(est, inner(inst.g.grad(a), f), jac[expert]);
      break;
    case Kind::sparsemixer2:
      axpy(est, inner(inst.g.grad(gated(inst, p, expert, 0.5)), f), jac[expert]);
      break;
    case Kind::st: {
      const auto up = inst.g.grad(a);
      for (std::size_t i = 0; i < n; ++i)
        if (inst.live(i)) axpy(est, inner(up, gated(inst, p, i)), jac[i]);
      break;
    }
    case Kind::stgs:
      throw std::invalid_argument("per_sample_grad0: stgs has Gumbel noise; use stgs_sample_grad0");
    case Kind::sparsemixer:
      break;
  }
  return est;
}

std::vector<double> stgs_sample_grad0(const SmallInstance& inst, double tau,
                                      std::span<const double> gumbel) {
  const std::size_t n = inst.num_experts();
  const auto p = gate_probs(inst);
  std::size_t d = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (inst.theta[i] + gumbel[i] > inst.theta[d] + gumbel[d]) d = i;
  std::vector<double> s(n);
  double top = -HUGE_VAL;
  for (std::size_t i = 0; i < n; ++i) top = std::max(top, (inst.theta[i] + gumbel[i]) / tau);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += (s[i] = std::exp((inst.theta[i] + gumbel[i]) / tau - top));
  for (auto& v : s) v /= z;
  const auto up = inst.g.grad(gated(inst, p, d));
  std::vector<double> est(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = inner(up, gated(inst, p, i));
    for (std::size_t k = 0; k < n; ++k)
      est[k] += c * s[i] * ((i == k ? 1.0 : 0.0) - s[k]) / tau;
  }
  return est;
}

double l2_norm(std::span<const double> v) { return std::sqrt(inner(v, v)); }

double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

namespace {
void fill_bias(GradReport& r) {
  r.bias_l2 = l2_distance(r.estimator_expectation, r.nabla0);
  const double ref = l2_norm(r.nabla0);
  r.rel_bias = ref > 0.0 ? r.bias_l2 / ref : (r.bias_l2 > 0.0 ? HUGE_VAL : 0.0);
}
}  // namespace

McPartial stgs_chunk(const SmallInstance& inst, double tau, std::uint64_t seed, std::size_t chunk,
                     std::size_t count) {
  const std::size_t n = inst.num_experts();
  Rng rng(seed, chunk);
  McPartial part{std::vector<double>(n, 0.0), 0.0, count};
  std::vector<double> gumbel(n);
  for (std::size_t s = 0; s < count; ++s) {
    for (auto& g : gumbel) g = rng.gumbel();
    const auto est = stgs_sample_grad0(inst, tau, gumbel);
    axpy(part.sum, 1.0, est);
    part.sum_sq_norm += inner(est, est);
  }
  return part;
}

GradReport finish_mc_report(const SmallInstance& inst, std::span<const McPartial> partials) {
  const auto exact = exact_grad_decomposed(inst);
  GradReport r;
  r.nabla0 = exact.nabla0;
  r.nabla1 = exact.nabla1;
  r.estimator_expectation.assign(inst.num_experts(), 0.0);
  double sq = 0.0;
  for (const auto& p : partials) {
    axpy(r.estimator_expectation, 1.0, p.sum);
    sq += p.sum_sq_norm;
    r.n_samples += p.count;
  }
  const double m = static_cast<double>(r.n_samples);
  for (auto& v : r.estimator_expectation) v /= m;
  const double mean_sq = inner(r.estimator_expectation, r.estimator_expectation);
  r.variance_trace = std::max(0.0, sq / m - mean_sq) * m / (m - 1.0);
  fill_bias(r);
  return r;
}

GradReport estimator_expectation(const SmallInstance& inst,
                                 const estimators::EstimatorConfig& config,
                                 std::size_t mc_samples, std::uint64_t seed) {
  inst.validate();
  if (config.kind == Kind::stgs) {
    if (mc_samples < kMinStgsSamples)
      throw std::invalid_argument("stgs expectation needs at least " +
                                  std::to_string(kMinStgsSamples) + " Monte Carlo samples");
    std::vector<McPartial> parts;
    for (std::size_t c = 0, done = 0; done < mc_samples; ++c) {
      const std::size_t count = std::min(kMcChunk, mc_samples - done);
      parts.push_back(stgs_chunk(inst, config.tau, seed, c, count));
      done += count;
    }
    return finish_mc_report(inst, parts);
  }
  const auto p = gate_probs(inst);
  const auto exact = exact_grad_decomposed(inst);
  GradReport r;
  r.nabla0 = exact.nabla0;
  r.nabla1 = exact.nabla1;
  const std::size_t n = p.size();
  r.estimator_expectation.assign(n, 0.0);
  std::vector<std::vector<double>> samples(n);
  for (std::size_t d = 0; d < n; ++d) {
    if (!inst.live(d) || p[d] == 0.0) continue;
    samples[d] = per_sample_grad0(inst, config, d);
    axpy(r.estimator_expectation, p[d], samples[d]);
  }
  for (std::size_t d = 0; d < n; ++d) {
    if (samples[d].empty()) continue;
    const double dist = l2_distance(samples[d], r.estimator_expectation);
    r.variance_trace += p[d] * dist * dist;
  }
  fill_bias(r);
  return r;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& loss,
                                     std::span<const double> params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + h;
    const double up = loss(x);
    x[k] = orig - h;
    const double down = loss(x);
    x[k] = orig;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

OrderStudyResult bias_order_study(const SmallInstance& base,
                                  const estimators::EstimatorConfig& config,
                                  std::span<const double> epsilons) {
  if (config.kind == Kind::stgs)
    throw std::invalid_argument("bias_order_study: stgs expectation is Monte Carlo only");
  OrderStudyResult out;
  std::vector<double> scale;
  for (double eps : epsilons) {
    const auto r = estimator_expectation(base.scaled(eps), config);
    out.epsilons.push_back(eps);
    out.bias_norms.push_back(r.bias_l2);
    scale.push_back(l2_norm(r.nabla0));
  }
  // Biases at rounding level carry no order information.
  constexpr double kExact = 1e-12;
  for (std::size_t k = 0; k + 1 < out.bias_norms.size(); ++k) {
    const double num = out.bias_norms[k], den = out.bias_norms[k + 1];
    if (num <= kExact * scale[k] || den <= kExact * scale[k + 1])
      out.ratios.push_back(std::nullopt);
    else
      out.ratios.push_back(num / den);
  }
  return out;
}

// ---- ODE one-step rules ----------------------------------------------------

std::vector<ScalarFunction> builtin_functions() {
  return {
      {"x^2", [](double x) { return x * x; }, [](double x) { return 2.0 * x; }},
      {"x^3", [](double x) { return x * x * x; }, [](double x) { return 3.0 * x * x; }},
      {"tanh", [](double x) { return std::tanh(x); },
       [](double x) {
         const double t = std::tanh(x);
         return 1.0 - t * t;
       }},
      {"exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); }},
  };
}

double ode_solver_error(const ScalarFunction& g, double t0, double t1, OdeMethod method) {
  const double s = method == OdeMethod::euler_endpoint ? t1 : 0.5 * (t0 + t1);
  return std::abs(g.value(t1) - g.value(t0) - g.derivative(s) * (t1 - t0));
}

std::string_view ode_method_name(OdeMethod m) {
  return m == OdeMethod::euler_endpoint ? "euler_endpoint" : "midpoint";
}

}  // namespace moegrad::oracle
