#include <gtest/gtest.h>

#include <cmath>

#include "moegrad/estimators.hpp"
#include "moegrad/oracle.hpp"
#include "moegrad/routing.hpp"

using namespace moegrad;
using namespace moegrad::estimators;
using routing::GateVector;
using routing::Mask;
using routing::SelectionMode;

namespace {

GateVector gates_of(ad::Tape& tape, const std::vector<double>& theta, Mask mask = {}) {
  if (mask.empty()) mask = routing::full_mask(theta.size());
  return routing::masked_gates(tape.leaf(Tensor::vector(theta)), std::move(mask));
}

EstimatorConfig cfg_for(Kind k, Nabla1Path path = Nabla1Path::standard) {
  auto c = EstimatorConfig::defaults_for(k);
  c.nabla1_path = path;
  return c;
}

// g(y) = offset + sum(a y) + sum(b y^2) on the tape, matching oracle::Downstream::polynomial.
struct QuadraticG {
  double offset;
  std::vector<double> a, b;

  ad::Var operator()(ad::Tape& tape, const ad::Var& y) const {
    auto lin = ad::sum(ad::mul(tape.constant(Tensor::vector(a)), y));
    auto quad = ad::sum(ad::mul(tape.constant(Tensor::vector(b)), ad::square(y)));
    return ad::add(ad::add(tape.constant(Tensor::scalar(offset)), lin), quad);
  }
  oracle::Downstream oracle() const {
    return oracle::Downstream::polynomial(offset, a, b, std::vector<double>(a.size(), 0.0));
  }
};

struct Problem {
  std::vector<double> theta;
  std::vector<std::vector<double>> f;
  QuadraticG g;

  oracle::SmallInstance instance() const { return {theta, {}, f, g.oracle()}; }
};

Problem random_problem(Rng& rng, std::size_t n, std::size_t d) {
  Problem p;
  for (std::size_t i = 0; i < n; ++i) p.theta.push_back(rng.normal());
  p.f.assign(n, std::vector<double>(d));
  for (auto& row : p.f)
    for (auto& v : row) v = rng.normal();
  p.g.offset = rng.normal();
  for (std::size_t k = 0; k < d; ++k) {
    p.g.a.push_back(rng.normal());
    p.g.b.push_back(rng.uniform(0.5, 1.5));
  }
  return p;
}

// Router-logit gradient of one sampled forward built with the tape contracts.
std::vector<double> tape_router_grad(const Problem& p, const EstimatorConfig& cfg,
                                     std::size_t expert, std::span<const double> gumbel = {}) {
  ad::Tape tape;
  auto theta = tape.leaf(Tensor::vector(p.theta));
  auto gates = routing::masked_gates(theta, routing::full_mask(p.theta.size()));
  const auto decision = routing::decision_for(gates, expert, SelectionMode::sampled);
  ad::Var y;
  if (is_dense(cfg.kind)) {
    std::vector<ad::Var> outs;
    for (const auto& f : p.f) outs.push_back(tape.constant(Tensor::vector(f)));
    y = route_output_dense(cfg, theta, gates, decision, outs, gumbel);
  } else {
    y = route_output(cfg, gates, decision, tape.constant(Tensor::vector(p.f[expert])));
  }
  auto loss = p.g(tape, y);
  if (cfg.kind == Kind::reinforce) loss = ad::add(loss, reinforce_surrogate(loss, gates, decision));
  const auto g = tape.backward(loss).of(theta);
  return {g.values().begin(), g.values().end()};
}

// <g'(pi_D f_D * scale), f_D> * d pi_D / d theta
std::vector<double> multiplier_path(const Problem& p, std::size_t expert, double scale) {
  const auto inst = p.instance();
  const auto pi = oracle::gate_probs(inst);
  const auto jac = oracle::gate_jacobian(inst);
  std::vector<double> y(p.f[expert]);
  for (auto& v : y) v *= pi[expert] * scale;
  const auto gp = inst.g.grad(y);
  double c = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) c += gp[k] * p.f[expert][k];
  std::vector<double> out(pi.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = c * jac[expert][k];
  return out;
}

void expect_close(std::span<const double> a, std::span<const double> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "component " << i;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

TEST(EstimatorConfig, NamesRoundTrip) {
  for (Kind k : kAllKinds) EXPECT_EQ(parse_kind(kind_name(k)), k);
  EXPECT_FALSE(parse_kind("sparsemixer3"));
  EXPECT_EQ(parse_nabla1("none"), Nabla1Path::none);
  EXPECT_FALSE(parse_nabla1("both"));
}

TEST(EstimatorConfig, Validation) {
  auto c = EstimatorConfig::defaults_for(Kind::stgs);
  EXPECT_FALSE(c.use_mask);
  EXPECT_NO_THROW(c.validate());
  c.use_mask = true;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EstimatorConfig::defaults_for(Kind::st);
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EstimatorConfig::defaults_for(Kind::sparsemixer);
  c.r = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EstimatorConfig::defaults_for(Kind::sparsemixer);
  c.scale_gate = false;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EstimatorConfig::defaults_for(Kind::neglect);
  c.scale_gate = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(EstimatorConfig, LabelsMarkAblations) {
  EXPECT_EQ(EstimatorConfig::defaults_for(Kind::sparsemixer).label(), "sparsemixer");
  auto c = EstimatorConfig::defaults_for(Kind::sparsemixer);
  c.use_mask = false;
  c.use_omega = false;
  EXPECT_EQ(c.label(), "sparsemixer-nomask-noomega");
  auto n = EstimatorConfig::defaults_for(Kind::neglect);
  n.scale_gate = false;
  EXPECT_EQ(n.label(), "neglect-noscale");
  EXPECT_EQ(cfg_for(Kind::sparsemixer1, Nabla1Path::none).label(), "sparsemixer1-grad0only");
}

// ---- forward values -------------------------------------------------------------

TEST(Estimators, NeglectForward) {
  ad::Tape tape;
  auto gates = gates_of(tape, {0, 0});
  const auto d = routing::decision_for(gates, 1, SelectionMode::sampled);
  auto f = tape.constant(Tensor::vector({2, 4}));
  EXPECT_EQ(route_output_neglect(gates, d, f).value(), Tensor::vector({1, 2}));
  EXPECT_EQ(route_output_sparsemixer1(gates, d, f).value(), Tensor::vector({1, 2}));
}

TEST(Estimators, SingleSurvivorHasNoGateGradient) {
  ad::Tape tape;
  auto theta = tape.leaf(Tensor::vector({1.0, 0.0}));
  auto gates = routing::masked_gates(theta, {true, false});
  const auto d = routing::decision_for(gates, 0, SelectionMode::sampled);
  auto f = tape.constant(Tensor::vector({2, 4}));
  auto y = route_output_neglect(gates, d, f);
  EXPECT_EQ(y.value(), Tensor::vector({2, 4}));
  const auto g = tape.backward(ad::sum(ad::square(y))).of(theta);
  EXPECT_EQ(g, Tensor::zeros({2}));
}

TEST(Estimators, SparseMixer2HalvesForward) {
  ad::Tape tape;
  auto gates = gates_of(tape, {std::log(0.6), std::log(0.4)});
  const auto d = routing::decision_for(gates, 0, SelectionMode::sampled);
  auto f = tape.constant(Tensor::vector({2, 4}));
  const auto y = route_output_sparsemixer2(gates, d, f).value();
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 1.2, 1e-15);
}

TEST(Estimators, CombinedDispatchesOnArgmax) {
  ad::Tape tape;
  auto gates = gates_of(tape, {std::log(0.9), std::log(0.1)});
  auto f0 = tape.constant(Tensor::vector({1.0, -2.0}));
  auto f1 = tape.constant(Tensor::vector({3.0, 5.0}));
  const auto d0 = routing::decision_for(gates, 0, SelectionMode::sampled);
  const auto d1 = routing::decision_for(gates, 1, SelectionMode::sampled);
  EXPECT_TRUE(d0.is_argmax);
  EXPECT_FALSE(d1.is_argmax);
  const auto y0 = route_output_sparsemixer(gates, d0, f0).value();
  EXPECT_NEAR(y0[0], 0.9, 1e-15);
  EXPECT_NEAR(y0[1], -1.8, 1e-15);
  const auto y1 = route_output_sparsemixer(gates, d1, f1).value();
  EXPECT_NEAR(y1[0], 0.15, 1e-15);
  EXPECT_NEAR(y1[1], 0.25, 1e-15);
  // inference decisions are never halved
  const auto inf = routing::argmax_expert(gates);
  EXPECT_EQ(route_output_sparsemixer(gates, inf, f0).value(), route_output_neglect(gates, inf, f0).value());
}

TEST(Estimators, ValueEquivalenceAcrossKinds) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape tape;
    std::vector<double> theta(5);
    for (auto& v : theta) v = rng.normal();
    auto gates = gates_of(tape, theta);
    const auto d = routing::sample_expert(gates, rng);
    auto f = tape.constant(Tensor::vector({rng.normal(), rng.normal(), rng.normal()}));
    const auto a = route_output_neglect(gates, d, f).value();
    const auto b = route_output_sparsemixer1(gates, d, f).value();
    const auto c = route_output_sparsemixer2(gates, d, f).value();
    const auto m = route_output_sparsemixer(gates, d, f).value();
    EXPECT_EQ(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(c[i], 0.5 * a[i]);
      EXPECT_EQ(m[i], d.is_argmax ? a[i] : c[i]);
    }
  }
}

TEST(Estimators, NoScaleGateOutputsRawExpert) {
  ad::Tape tape;
  auto gates = gates_of(tape, {0.2, -0.1});
  const auto d = routing::decision_for(gates, 1, SelectionMode::sampled);
  auto f = tape.constant(Tensor::vector({2, 4}));
  auto c = EstimatorConfig::defaults_for(Kind::neglect);
  c.scale_gate = false;
  EXPECT_EQ(route_output(c, gates, d, f).value(), Tensor::vector({2, 4}));
}

TEST(Estimators, DenseKindsNeedDenseContract) {
  ad::Tape tape;
  auto theta = tape.leaf(Tensor::vector({0.0, 0.0}));
  auto gates = routing::masked_gates(theta, routing::full_mask(2));
  const auto d = routing::decision_for(gates, 0, SelectionMode::sampled);
  auto f = tape.constant(Tensor::vector({1.0}));
  EXPECT_THROW(route_output(EstimatorConfig::defaults_for(Kind::st), gates, d, f), std::invalid_argument);
  std::vector<ad::Var> one{f};
  EXPECT_THROW(route_output_dense(EstimatorConfig::defaults_for(Kind::st), theta, gates, d, one),
               std::invalid_argument);
  std::vector<ad::Var> two{f, f};
  EXPECT_THROW(route_output_dense(EstimatorConfig::defaults_for(Kind::stgs), theta, gates, d, two),
               std::invalid_argument);
}

TEST(Estimators, DecisionMustBeLive) {
  ad::Tape tape;
  auto gates = gates_of(tape, {1.0, 0.0}, {true, false});
  routing::RoutingDecision bad{1, 0.0, false, SelectionMode::sampled};
  auto f = tape.constant(Tensor::vector({1.0}));
  EXPECT_THROW(route_output_neglect(gates, bad, f), std::invalid_argument);
}

// ---- omega ------------------------------------------------------------------------

TEST(Estimators, ApplyOmega) {
  ad::Tape tape;
  auto y = tape.leaf(Tensor::vector({3, 5}));
  auto ones = tape.leaf(Tensor::filled({2}, 1.0));
  EXPECT_EQ(apply_omega(y, ones).value(), y.value());
  auto w = tape.leaf(Tensor::vector({2, 0}));
  auto out = apply_omega(y, w);
  EXPECT_EQ(out.value(), Tensor::vector({6, 0}));
  auto up = tape.constant(Tensor::vector({0.5, -1.0}));
  EXPECT_EQ(tape.backward(ad::sum(ad::mul(up, out))).of(w), Tensor::vector({1.5, -5.0}));
  EXPECT_THROW(apply_omega(y, tape.leaf(Tensor::vector({1, 2, 3}))), std::invalid_argument);
}

// ---- value-level gradient contracts -------------------------------------------------

TEST(Estimators, GradReinforceExamples) {
  const std::vector<double> pi{0.5, 0.5};
  const Mask mask{true, true};
  EXPECT_EQ(grad_reinforce(0.0, pi, mask, 0), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(grad_reinforce(1.0, pi, mask, 0), (std::vector<double>{0.5, -0.5}));
  const std::vector<double> masked_pi{1.0, 0.0};
  EXPECT_EQ(grad_reinforce(2.0, masked_pi, Mask{true, false}, 0), (std::vector<double>{0.0, 0.0}));
}

TEST(Estimators, GradStExamples) {
  DenseRoutingContext ctx{{Tensor::vector({1.0}), Tensor::vector({2.0})}, {}};
  const std::vector<double> pi{0.5, 0.5};
  const std::vector<double> one{1.0}, zero{0.0};
  EXPECT_NEAR(grad_st(ctx, pi, one)[0], -0.125, 1e-15);
  EXPECT_EQ(grad_st(ctx, pi, zero), (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(grad_st(DenseRoutingContext{}, pi, one), std::invalid_argument);
}

TEST(Estimators, GradStgsReducesToStWithoutNoise) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4;
    std::vector<double> theta(n);
    for (auto& v : theta) v = rng.normal();
    DenseRoutingContext ctx;
    for (std::size_t i = 0; i < n; ++i) ctx.expert_outputs.push_back(Tensor::vector({rng.normal(), rng.normal()}));
    ctx.gumbel.assign(n, 0.0);
    const std::vector<double> up{rng.normal(), rng.normal()};
    const auto pi = tempered_softmax(theta, {}, 1.0);
    expect_close(grad_stgs(ctx, theta, 1.0, up), grad_st(ctx, pi, up), 1e-15);
  }
}

TEST(Estimators, GradStgsShrinksWithTemperature) {
  DenseRoutingContext ctx{{Tensor::vector({1.0}), Tensor::vector({2.0}), Tensor::vector({-1.0})},
                          {0.0, 0.0, 0.0}};
  const std::vector<double> theta{0.3, -0.2, 0.1}, up{1.0};
  const double g100 = grad_stgs(ctx, theta, 100.0, up)[0];
  const double g1000 = grad_stgs(ctx, theta, 1000.0, up)[0];
  EXPECT_NEAR(g100 / g1000, 10.0, 0.05);
  DenseRoutingContext missing;
  EXPECT_THROW(grad_stgs(missing, theta, 1.0, up), std::invalid_argument);
}

TEST(Estimators, GumbelArgmaxMatchesSoftmax) {
  Rng rng(9);
  const std::vector<double> theta{0.5, -0.3, 0.1};
  const auto pi = tempered_softmax(theta, {}, 1.0);
  std::vector<int> counts(3, 0);
  constexpr int kDraws = 100000;
  for (int k = 0; k < kDraws; ++k) ++counts[gumbel_argmax(theta, draw_gumbel(3, rng))];
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(static_cast<double>(counts[i]) / kDraws, pi[i], 0.01);
}

// ---- tape contracts against the oracle, per sample ------------------------------------

TEST(Estimators, TapeGrad0MatchesOraclePerSample) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(rng, 2 + trial % 5, 1 + trial % 3);
    const auto inst = p.instance();
    for (Kind k : {Kind::neglect, Kind::reinforce, Kind::sparsemixer1, Kind::sparsemixer2,
                   Kind::sparsemixer, Kind::st}) {
      const auto cfg = cfg_for(k, Nabla1Path::none);
      for (std::size_t d = 0; d < p.theta.size(); ++d)
        expect_close(tape_router_grad(p, cfg, d), oracle::per_sample_grad0(inst, cfg, d), 1e-12);
    }
  }
}

TEST(Estimators, TapeStgsMatchesOraclePerSample) {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(rng, 3, 2);
    for (double tau : {0.5, 1.0, 3.0}) {
      auto cfg = cfg_for(Kind::stgs, Nabla1Path::none);
      cfg.tau = tau;
      const auto g = draw_gumbel(p.theta.size(), rng);
      const auto d = gumbel_argmax(p.theta, g);
      expect_close(tape_router_grad(p, cfg, d, g), oracle::stgs_sample_grad0(p.instance(), tau, g), 1e-12);
    }
  }
}

TEST(Estimators, StandardPathAddsMultiplierGradient) {
  Rng rng(33);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_problem(rng, 4, 2);
    const auto inst = p.instance();
    const auto top = routing::argmax_index(oracle::gate_probs(inst));
    for (std::size_t d = 0; d < 4; ++d) {
      auto check = [&](Kind k, double scale) {
        auto expected = oracle::per_sample_grad0(inst, cfg_for(k, Nabla1Path::none), d);
        const auto mult = multiplier_path(p, d, scale);
        for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += scale * mult[i];
        expect_close(tape_router_grad(p, cfg_for(k), d), expected, 1e-12);
      };
      check(Kind::neglect, 1.0);
      check(Kind::reinforce, 1.0);
      check(Kind::sparsemixer1, 1.0);
      check(Kind::sparsemixer2, 0.5);
      check(Kind::sparsemixer, d == top ? 1.0 : 0.5);
      check(Kind::st, 1.0);
    }
  }
}

TEST(Estimators, SparseMixer2IsTwiceHalvedBackprop) {
  Rng rng(34);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_problem(rng, 3, 2);
    const std::size_t d = trial % 3;
    ad::Tape tape;
    auto theta = tape.leaf(Tensor::vector(p.theta));
    auto gates = routing::masked_gates(theta, routing::full_mask(3));
    const auto dec = routing::decision_for(gates, d, SelectionMode::sampled);
    auto f = tape.constant(Tensor::vector(p.f[d]));
    auto trick = route_output_sparsemixer2(gates, dec, f, Nabla1Path::none);
    auto plain = ad::scale(ad::mul(ad::select(gates.pi, d), f), 0.5);
    EXPECT_EQ(trick.value(), plain.value());
    const auto gt = tape.backward(p.g(tape, trick)).of(theta);
    const auto gp = tape.backward(p.g(tape, plain)).of(theta);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(gt[i], 2.0 * gp[i], 1e-15);
  }
}

TEST(Estimators, ReinforceSurrogateIsZeroValued) {
  ad::Tape tape;
  auto gates = gates_of(tape, {0.4, -0.3, 0.1});
  const auto d = routing::decision_for(gates, 2, SelectionMode::sampled);
  auto loss = tape.leaf(Tensor::scalar(3.7));
  EXPECT_EQ(reinforce_surrogate(loss, gates, d).value().item(), 0.0);
}
