#include "moegrad/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace moegrad::estimators {

using routing::GateVector;
using routing::RoutingDecision;

std::string_view kind_name(Kind kind) {
  switch (kind) {
    case Kind::neglect: return "neglect";
    case Kind::reinforce: return "reinforce";
    case Kind::st: return "st";
    case Kind::stgs: return "stgs";
    case Kind::sparsemixer1: return "sparsemixer1";
    case Kind::sparsemixer2: return "sparsemixer2";
    case Kind::sparsemixer: return "sparsemixer";
  }
  return "?";
}

std::optional<Kind> parse_kind(std::string_view name) {
  for (Kind k : kAllKinds)
    if (kind_name(k) == name) return k;
  return std::nullopt;
}

std::string_view nabla1_name(Nabla1Path path) {
  return path == Nabla1Path::standard ? "standard" : "none";
}

std::optional<Nabla1Path> parse_nabla1(std::string_view name) {
  if (name == "standard") return Nabla1Path::standard;
  if (name == "none") return Nabla1Path::none;
  return std::nullopt;
}

namespace {
bool is_sparsemixer_family(Kind k) {
  return k == Kind::sparsemixer || k == Kind::sparsemixer1 || k == Kind::sparsemixer2;
}
}  // namespace

EstimatorConfig EstimatorConfig::defaults_for(Kind kind) {
  EstimatorConfig c;
  c.kind = kind;
  c.use_mask = !is_dense(kind);
  c.use_omega = is_sparsemixer_family(kind);
  return c;
}

void EstimatorConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw std::invalid_argument("estimator.tau: must be positive and finite");
  if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("jitter_r: must lie in [0, 1)");
  if (is_dense(kind) && use_mask)
    throw std::invalid_argument("estimator.use_mask: kind '" + std::string(kind_name(kind)) +
                                "' runs only without the routing mask");
  if (!scale_gate && kind != Kind::neglect && kind != Kind::reinforce)
    throw std::invalid_argument("estimator.scale_gate: false is only supported for kinds "
                                "'neglect' and 'reinforce'");
}

std::string EstimatorConfig::label() const {
  const auto d = defaults_for(kind);
  std::string s(kind_name(kind));
  if (use_mask != d.use_mask) s += use_mask ? "+mask" : "-nomask";
  if (use_omega != d.use_omega) s += use_omega ? "+omega" : "-noomega";
  if (!scale_gate) s += "-noscale";
  if (nabla1_path == Nabla1Path::none) s += "-grad0only";
  return s;
}

std::vector<double> draw_gumbel(std::size_t n, Rng& rng) {
  std::vector<double> g(n);
  for (auto& v : g) v = rng.gumbel();
  return g;
}

std::size_t gumbel_argmax(std::span<const double> theta, std::span<const double> gumbel) {
  std::vector<double> s(theta.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = theta[i] + gumbel[i];
  return routing::argmax_index(s);
}

std::vector<double> tempered_softmax(std::span<const double> theta, std::span<const double> gumbel,
                                     double tau) {
  std::vector<double> z(theta.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = (theta[i] + (gumbel.empty() ? 0.0 : gumbel[i])) / tau;
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) total += (v = std::exp(v - mx));
  for (auto& v : z) v /= total;
  return z;
}

namespace {

ad::Var gate_of(const GateVector& gates, const RoutingDecision& d) {
  return ad::select(gates.pi, d.expert);
}

void check_decision(const GateVector& gates, const RoutingDecision& d) {
  if (d.expert >= gates.size()) throw std::out_of_range("routing decision outside expert range");
  if (!gates.mask[d.expert]) throw std::invalid_argument("routing decision selects a masked expert");
}

}  // namespace

ad::Var route_output_neglect(const GateVector& gates, const RoutingDecision& decision,
                             const ad::Var& expert_out, Nabla1Path path) {
  check_decision(gates, decision);
  auto gate = gate_of(gates, decision);
  if (path == Nabla1Path::none) gate = ad::stop_gradient(gate);
  return ad::mul(gate, expert_out);
}

ad::Var route_output_sparsemixer1(const GateVector& gates, const RoutingDecision& decision,
                                  const ad::Var& expert_out, Nabla1Path path) {
  check_decision(gates, decision);
  // The forward-Euler grad0 estimate coincides per sample with the multiplier
  // path, so the standard composition doubles it.
  const double factor = path == Nabla1Path::standard ? 2.0 : 1.0;
  return ad::mul(ad::scale_gradient(gate_of(gates, decision), factor), expert_out);
}

ad::Var route_output_sparsemixer2(const GateVector& gates, const RoutingDecision& decision,
                                  const ad::Var& expert_out, Nabla1Path path) {
  check_decision(gates, decision);
  if (decision.mode == routing::SelectionMode::argmax)
    return ad::mul(gate_of(gates, decision), expert_out);
  // Mid-point: evaluate downstream at pi_D f_D / 2 and push 2x through the gate;
  // grad1 (when kept) is the plain multiplier gradient of that same forward.
  const double factor = path == Nabla1Path::standard ? 3.0 : 2.0;
  auto gated = ad::mul(ad::scale_gradient(gate_of(gates, decision), factor), expert_out);
  return ad::scale(gated, 0.5);
}

ad::Var route_output_sparsemixer(const GateVector& gates, const RoutingDecision& decision,
                                 const ad::Var& expert_out, Nabla1Path path) {
  return decision.is_argmax ? route_output_sparsemixer1(gates, decision, expert_out, path)
                            : route_output_sparsemixer2(gates, decision, expert_out, path);
}

ad::Var route_output(const EstimatorConfig& config, const GateVector& gates,
                     const RoutingDecision& decision, const ad::Var& expert_out) {
  if (!config.scale_gate) {
    check_decision(gates, decision);
    return expert_out;
  }
  switch (config.kind) {
    case Kind::neglect:
    case Kind::reinforce:
      return route_output_neglect(gates, decision, expert_out, config.nabla1_path);
    case Kind::sparsemixer1:
      return route_output_sparsemixer1(gates, decision, expert_out, config.nabla1_path);
    case Kind::sparsemixer2:
      return route_output_sparsemixer2(gates, decision, expert_out, config.nabla1_path);
    case Kind::sparsemixer:
      return route_output_sparsemixer(gates, decision, expert_out, config.nabla1_path);
    case Kind::st:
    case Kind::stgs:
      break;
  }
  throw std::invalid_argument("route_output: kind '" + std::string(kind_name(config.kind)) +
                              "' needs all expert outputs (use route_output_dense)");
}

ad::Var reinforce_surrogate(const ad::Var& token_loss, const GateVector& gates,
                            const RoutingDecision& decision) {
  check_decision(gates, decision);
  auto s = ad::mul(ad::stop_gradient(token_loss), ad::log(gate_of(gates, decision)));
  return ad::sub(s, ad::stop_gradient(s));
}

ad::Var route_output_dense(const EstimatorConfig& config, const ad::Var& theta,
                           const GateVector& gates, const RoutingDecision& decision,
                           std::span<const ad::Var> expert_outputs, std::span<const double> gumbel) {
  if (!is_dense(config.kind))
    throw std::invalid_argument("route_output_dense: kind is sparse");
  const std::size_t n = gates.size();
  if (expert_outputs.size() != n)
    throw std::invalid_argument("route_output_dense: dense context missing (" +
                                std::to_string(expert_outputs.size()) + " of " +
                                std::to_string(n) + " expert outputs)");
  check_decision(gates, decision);
  auto& tape = *theta.tape();

  ad::Var relaxed = gates.pi;
  if (config.kind == Kind::stgs) {
    if (gumbel.size() != n) throw std::invalid_argument("route_output_dense: STGS needs N Gumbel draws");
    auto shifted = ad::add(theta, tape.constant(Tensor::vector({gumbel.begin(), gumbel.end()})));
    relaxed = ad::softmax(ad::scale(shifted, 1.0 / config.tau));
  }
  Tensor onehot = Tensor::zeros({n});
  onehot[decision.expert] = 1.0;
  auto st = ad::add(tape.constant(std::move(onehot)), ad::sub(relaxed, ad::stop_gradient(relaxed)));
  auto pi = config.nabla1_path == Nabla1Path::standard ? gates.pi : ad::stop_gradient(gates.pi);

  ad::Var y;
  for (std::size_t i = 0; i < n; ++i) {
    auto term = ad::mul(ad::select(st, i), ad::mul(ad::select(pi, i), expert_outputs[i]));
    y = i == 0 ? term : ad::add(y, term);
  }
  return y;
}

ad::Var apply_omega(const ad::Var& y, const ad::Var& omega) {
  if (y.shape() != omega.shape())
    throw std::invalid_argument("apply_omega: omega " + shape_string(omega.shape()) +
                                " vs output " + shape_string(y.shape()));
  return ad::mul(omega, y);
}

ad::Var apply_omega_per_expert(const ad::Var& y, const ad::Var& omega, std::size_t expert) {
  return ad::mul(ad::select(omega, expert), y);
}

std::vector<double> grad_reinforce(double loss_value, std::span<const double> pi,
                                   const routing::Mask& mask, std::size_t expert) {
  std::vector<double> g(pi.size(), 0.0);
  for (std::size_t k = 0; k < pi.size(); ++k)
    if (mask[k]) g[k] = loss_value * ((k == expert ? 1.0 : 0.0) - pi[k]);
  return g;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// sum_i c_i dP_i/dtheta for P = softmax(z / scale): (1/scale) P (.) (c - <P, c>).
std::vector<double> contract_softmax_jacobian(std::span<const double> p,
                                              std::span<const double> c, double inv_scale) {
  const double mean = dot(p, c);
  std::vector<double> g(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) g[k] = inv_scale * p[k] * (c[k] - mean);
  return g;
}

std::vector<double> straight_through_weights(const DenseRoutingContext& ctx,
                                             std::span<const double> pi,
                                             std::span<const double> upstream) {
  if (!ctx.populated() || ctx.expert_outputs.size() != pi.size())
    throw std::invalid_argument("dense routing context missing expert outputs");
  std::vector<double> c(pi.size());
  for (std::size_t i = 0; i < pi.size(); ++i) {
    const auto f = ctx.expert_outputs[i].values();
    if (f.size() != upstream.size())
      throw std::invalid_argument("upstream gradient length does not match expert output");
    c[i] = pi[i] * dot(upstream, f);
  }
  return c;
}

}  // namespace

std::vector<double> grad_st(const DenseRoutingContext& ctx, std::span<const double> pi,
                            std::span<const double> upstream) {
  const auto c = straight_through_weights(ctx, pi, upstream);
  return contract_softmax_jacobian(pi, c, 1.0);
}

std::vector<double> grad_stgs(const DenseRoutingContext& ctx, std::span<const double> theta,
                              double tau, std::span<const double> upstream) {
  if (ctx.gumbel.size() != theta.size())
    throw std::invalid_argument("grad_stgs: context carries no Gumbel draws");
  const auto pi = tempered_softmax(theta, {}, 1.0);
  const auto c = straight_through_weights(ctx, pi, upstream);
  const auto s = tempered_softmax(theta, ctx.gumbel, tau);
  return contract_softmax_jacobian(s, c, 1.0 / tau);
}

}  // namespace moegrad::estimators
