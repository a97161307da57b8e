#include "moegrad/moe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace moegrad::moe {

using estimators::Kind;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols});
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

void MoELayer::validate() const {
  if (experts.size() < 2) throw std::invalid_argument("MoE layer needs at least two experts");
  if (w_router.rank() != 2 || w_router.rows() != experts.size())
    throw std::invalid_argument("router weights " + shape_string(w_router.shape()) +
                                " do not match " + std::to_string(experts.size()) + " experts");
  const std::size_t d = w_router.cols();
  const Shape u_shape = experts.front().u.shape();
  for (const auto& e : experts) {
    if (e.u.shape() != u_shape || e.u.rank() != 2 || e.u.cols() != d)
      throw std::invalid_argument("expert U shape " + shape_string(e.u.shape()) + " inconsistent");
    if (e.v.rank() != 2 || e.v.rows() != d || e.v.cols() != e.u.rows())
      throw std::invalid_argument("expert V shape " + shape_string(e.v.shape()) + " inconsistent");
  }
  const std::size_t omega_len = omega_mode == OmegaMode::per_dimension ? d : experts.size();
  if (omega.shape() != Shape{omega_len})
    throw std::invalid_argument("omega shape " + shape_string(omega.shape()) + " inconsistent");
  config.validate();
}

MoELayer MoELayer::init(std::size_t num_experts, std::size_t d_model, std::size_t d_hidden,
                        const estimators::EstimatorConfig& config, Rng& rng, double router_scale) {
  MoELayer layer;
  const double rs = router_scale > 0.0 ? router_scale : 1.0 / std::sqrt(static_cast<double>(d_model));
  layer.w_router = random_matrix(num_experts, d_model, rs, rng);
  for (std::size_t i = 0; i < num_experts; ++i) {
    ExpertParams e;
    e.u = random_matrix(d_hidden, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
    e.v = random_matrix(d_model, d_hidden, 1.0 / std::sqrt(static_cast<double>(d_hidden)), rng);
    layer.experts.push_back(std::move(e));
  }
  layer.omega = Tensor::filled({d_model}, 1.0);
  layer.config = config;
  layer.validate();
  return layer;
}

LayerVars bind(ad::Tape& tape, const MoELayer& layer, bool requires_grad) {
  LayerVars vars;
  vars.w_router = tape.leaf(layer.w_router, requires_grad);
  for (const auto& e : layer.experts) {
    vars.u.push_back(tape.leaf(e.u, requires_grad));
    vars.v.push_back(tape.leaf(e.v, requires_grad));
  }
  vars.omega = tape.leaf(layer.omega, requires_grad && layer.config.use_omega);
  return vars;
}

std::vector<double> RoutingRecord::mean_gate_mass() const {
  std::vector<double> m = gate_mass;
  const double n = static_cast<double>(std::max<std::size_t>(tokens(), 1));
  for (auto& v : m) v /= n;
  return m;
}

double RoutingRecord::max_load_fraction() const {
  if (tokens() == 0) return 0.0;
  return static_cast<double>(*std::max_element(load.begin(), load.end())) /
         static_cast<double>(tokens());
}

ad::Var expert_forward(const ad::Var& u, const ad::Var& v, const ad::Var& x, Activation act) {
  auto pre = ad::matmul(u, x);
  return ad::matmul(v, act == Activation::tanh ? ad::tanh(pre) : ad::relu(pre));
}

Tensor expert_forward(const ExpertParams& params, const Tensor& x, Activation act) {
  ad::Tape tape;
  return expert_forward(tape.constant(params.u), tape.constant(params.v), tape.constant(x), act)
      .value();
}

TokenRouting moe_forward_token(const MoELayer& layer, const LayerVars& vars, const ad::Var& x,
                               Mode mode, Rng& rng, RoutingRecord& record) {
  const auto& cfg = layer.config;
  const std::size_t n = layer.num_experts();
  if (x.shape() != Shape{layer.d_model()})
    throw std::invalid_argument("moe_forward: input " + shape_string(x.shape()) +
                                " vs d_model " + std::to_string(layer.d_model()));

  TokenRouting out;
  out.theta = routing::router_logits(vars.w_router, x);
  const auto theta = out.theta.value().values();
  auto mask = cfg.use_mask ? routing::routing_mask(theta, cfg.r) : routing::full_mask(n);
  out.gates = routing::masked_gates(out.theta, std::move(mask));

  std::vector<double> gumbel;
  if (mode == Mode::infer) {
    out.decision = routing::argmax_expert(out.gates);
  } else if (cfg.kind == Kind::neglect && cfg.use_mask) {
    // Switch baseline: multiplicative jitter on the logits; the mask is its support.
    const auto d = routing::jitter_argmax(theta, cfg.r, rng);
    out.decision = routing::decision_for(out.gates, d, routing::SelectionMode::sampled);
  } else if (cfg.kind == Kind::stgs) {
    gumbel = estimators::draw_gumbel(n, rng);
    out.decision = routing::decision_for(out.gates, estimators::gumbel_argmax(theta, gumbel),
                                         routing::SelectionMode::sampled);
  } else {
    out.decision = routing::sample_expert(out.gates, rng);
  }
  const std::size_t d = out.decision.expert;

  if (mode == Mode::train && estimators::is_dense(cfg.kind)) {
    std::vector<ad::Var> outs;
    outs.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      outs.push_back(expert_forward(vars.u[i], vars.v[i], x, layer.activation));
    record.expert_calls += n;
    out.y = estimators::route_output_dense(cfg, out.theta, out.gates, out.decision, outs, gumbel);
  } else {
    auto f = expert_forward(vars.u[d], vars.v[d], x, layer.activation);
    record.expert_calls += 1;
    if (estimators::is_dense(cfg.kind)) {
      out.y = ad::mul(ad::select(out.gates.pi, d), f);
    } else {
      out.y = estimators::route_output(cfg, out.gates, out.decision, f);
    }
  }
  if (cfg.use_omega) {
    out.y = layer.omega_mode == OmegaMode::per_dimension
                ? estimators::apply_omega(out.y, vars.omega)
                : estimators::apply_omega_per_expert(out.y, vars.omega, d);
  }

  record.decisions.push_back(out.decision);
  record.gate_probs.push_back(out.gates.pi);
  record.load[d] += 1;
  const auto pi = out.gates.probs();
  for (std::size_t i = 0; i < n; ++i) record.gate_mass[i] += pi[i];
  return out;
}

Tensor moe_forward(const MoELayer& layer, const Tensor& x, Mode mode, Rng& rng,
                   RoutingRecord* record) {
  ad::Tape tape;
  const auto vars = bind(tape, layer, false);
  RoutingRecord local(layer.num_experts());
  auto& rec = record ? *record : local;
  if (rec.load.size() != layer.num_experts()) rec = RoutingRecord(layer.num_experts());
  auto out = moe_forward_token(layer, vars, tape.constant(x), mode, rng, rec);
  rec.gate_probs.clear();  // tape-bound; not valid past this call
  return out.y.value();
}

double load_balance_value(std::span<const std::size_t> load, std::span<const double> mean_gate) {
  std::size_t total = 0;
  for (auto c : load) total += c;
  if (total == 0) throw std::invalid_argument("load_balance_loss: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < load.size(); ++i)
    s += static_cast<double>(load[i]) / static_cast<double>(total) * mean_gate[i];
  return static_cast<double>(load.size()) * s;
}

ad::Var load_balance_loss(const RoutingRecord& record, std::size_t num_experts) {
  if (record.tokens() == 0 || record.gate_probs.empty())
    throw std::invalid_argument("load_balance_loss: empty batch");
  const double t = static_cast<double>(record.tokens());
  Tensor fraction = Tensor::zeros({num_experts});
  for (std::size_t i = 0; i < num_experts; ++i)
    fraction[i] = static_cast<double>(record.load[i]) / t;
  ad::Var mass = record.gate_probs.front();
  for (std::size_t k = 1; k < record.gate_probs.size(); ++k)
    mass = ad::add(mass, record.gate_probs[k]);
  auto& tape = *mass.tape();
  auto weighted = ad::sum(ad::mul(tape.constant(std::move(fraction)), mass));
  return ad::scale(weighted, static_cast<double>(num_experts) / t);
}

MoELayer fold_omega(const MoELayer& layer) {
  MoELayer out = layer;
  const auto& w = layer.omega;
  if (layer.config.use_omega) {
    for (std::size_t e = 0; e < out.experts.size(); ++e) {
      auto& v = out.experts[e].v;
      for (std::size_t r = 0; r < v.rows(); ++r) {
        const double s = layer.omega_mode == OmegaMode::per_dimension ? w[r] : w[e];
        for (std::size_t c = 0; c < v.cols(); ++c) v.at(r, c) *= s;
      }
    }
  }
  out.omega = Tensor::filled(layer.omega.shape(), 1.0);
  return out;
}

Network Network::init(std::size_t num_experts, std::size_t d_model, std::size_t d_hidden,
                      std::size_t d_out, const estimators::EstimatorConfig& config, Rng& rng) {
  Network net;
  net.moe = MoELayer::init(num_experts, d_model, d_hidden, config, rng);
  net.w_out = random_matrix(d_out, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
  net.b_out = Tensor::zeros({d_out});
  return net;
}

NetworkVars bind(ad::Tape& tape, const Network& net, bool requires_grad) {
  NetworkVars vars;
  vars.moe = bind(tape, net.moe, requires_grad);
  vars.w_out = tape.leaf(net.w_out, requires_grad);
  vars.b_out = tape.leaf(net.b_out, requires_grad);
  return vars;
}

namespace {

Tensor row_of(const Tensor& m, std::size_t r) {
  const std::size_t c = m.cols();
  auto first = m.values().begin() + static_cast<std::ptrdiff_t>(r * c);
  return Tensor::vector(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(c)));
}

ad::Var token_loss(const ad::Var& pred, const Tensor& target, TaskKind task, ad::Tape& tape) {
  if (task == TaskKind::regression) {
    auto diff = ad::sub(pred, tape.constant(target));
    return ad::scale(ad::sum(ad::square(diff)), 1.0 / static_cast<double>(target.size()));
  }
  const auto cls = routing::argmax_index(target.values());
  return ad::scale(ad::select(ad::log_softmax(pred), cls), -1.0);
}

}  // namespace

BatchObjective batch_objective(const Network& net, const NetworkVars& vars, ad::Tape& tape,
                               const Tensor& inputs, const Tensor& targets,
                               std::span<const std::size_t> rows, TaskKind task, Mode mode,
                               double lb_coef, Rng& rng) {
  if (rows.empty()) throw std::invalid_argument("batch_objective: empty batch");
  BatchObjective out{ad::Var{}, 0.0, 0.0, RoutingRecord(net.moe.num_experts())};
  const double inv_b = 1.0 / static_cast<double>(rows.size());
  ad::Var total;
  ad::Var surrogate;
  const bool reinforce = mode == Mode::train && net.moe.config.kind == Kind::reinforce;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto x = tape.constant(row_of(inputs, rows[k]));
    auto routed = moe_forward_token(net.moe, vars.moe, x, mode, rng, out.record);
    auto hidden = ad::add(x, routed.y);
    auto pred = ad::add(ad::matmul(vars.w_out, hidden), vars.b_out);
    auto loss = token_loss(pred, row_of(targets, rows[k]), task, tape);
    total = k == 0 ? loss : ad::add(total, loss);
    if (reinforce) {
      auto s = estimators::reinforce_surrogate(loss, routed.gates, routed.decision);
      surrogate = k == 0 ? s : ad::add(surrogate, s);
    }
  }
  auto task_mean = ad::scale(total, inv_b);
  out.task_loss = task_mean.value().item();
  auto objective = task_mean;
  if (reinforce) objective = ad::add(objective, ad::scale(surrogate, inv_b));
  if (lb_coef != 0.0) {
    auto lb = load_balance_loss(out.record, net.moe.num_experts());
    out.lb_loss = lb.value().item();
    objective = ad::add(objective, ad::scale(lb, lb_coef));
  } else {
    out.lb_loss = load_balance_value(out.record.load, out.record.mean_gate_mass());
  }
  out.objective = objective;
  return out;
}

double evaluate_loss(const Network& net, const Tensor& inputs, const Tensor& targets,
                     TaskKind task) {
  Rng unused(0);
  double total = 0.0;
  const std::size_t n = inputs.rows();
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    std::vector<std::size_t> rows(end - start);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
    ad::Tape tape;
    const auto vars = bind(tape, net, false);
    auto res = batch_objective(net, vars, tape, inputs, targets, rows, task, Mode::infer, 0.0, unused);
    total += res.task_loss * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(n);
}

}  // namespace moegrad::moe
