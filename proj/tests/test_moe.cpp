#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "moegrad/moe.hpp"
#include "moegrad/oracle.hpp"

using namespace moegrad;
using namespace moegrad::moe;
using estimators::EstimatorConfig;
using estimators::Kind;

namespace {

Tensor random_vector(std::size_t n, Rng& rng) {
  Tensor t = Tensor::zeros({n});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

MoELayer make_layer(Kind kind, std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return MoELayer::init(n, d, 2 * d, EstimatorConfig::defaults_for(kind), rng);
}

}  // namespace

TEST(Expert, ZeroInputWeightsGiveZeroOutput) {
  ExpertParams e{Tensor::zeros({3, 2}), Tensor::matrix({{1, 2, 3}, {4, 5, 6}})};
  EXPECT_EQ(expert_forward(e, Tensor::vector({0.7, -0.2})), Tensor::zeros({2}));
}

TEST(Expert, LinearRegimeIsVU) {
  ExpertParams e{Tensor::matrix({{1e-4, 0.0}, {0.0, 2e-4}}), Tensor::matrix({{1.0, 1.0}, {0.0, 3.0}})};
  const auto y = expert_forward(e, Tensor::vector({1.0, 1.0}));
  EXPECT_NEAR(y[0], 3e-4, 1e-11);
  EXPECT_NEAR(y[1], 6e-4, 1e-11);
}

TEST(Expert, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  for (auto act : {Activation::tanh, Activation::relu}) {
    std::vector<Tensor> params{Tensor::zeros({4, 3}), Tensor::zeros({3, 4}), Tensor::zeros({3})};
    for (auto& p : params)
      for (auto& v : p.values()) v = rng.normal();
    auto build = [act](ad::Tape&, const std::vector<ad::Var>& p) {
      return ad::sum(ad::square(expert_forward(p[0], p[1], p[2], act)));
    };
    EXPECT_LE(moegrad::fdcheck::gradcheck(build, params), 1e-6);
  }
}

TEST(MoELayer, InitShapesAndValidation) {
  const auto layer = make_layer(Kind::sparsemixer, 4, 3, 1);
  EXPECT_EQ(layer.num_experts(), 4u);
  EXPECT_EQ(layer.d_model(), 3u);
  EXPECT_EQ(layer.d_hidden(), 6u);
  EXPECT_EQ(layer.omega, Tensor::filled({3}, 1.0));
  auto bad = layer;
  bad.omega = Tensor::filled({4}, 1.0);
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad.omega_mode = OmegaMode::per_expert;
  EXPECT_NO_THROW(bad.validate());
  auto one = layer;
  one.experts.resize(1);
  EXPECT_THROW(one.validate(), std::invalid_argument);
}

TEST(MoELayer, InferenceUsesArgmaxGateTimesExpert) {
  auto layer = make_layer(Kind::sparsemixer, 3, 2, 2);
  Rng rng(0), data(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_vector(2, data);
    ad::Tape tape;
    auto theta = routing::router_logits(tape.constant(layer.w_router), tape.constant(x));
    const auto mask = routing::routing_mask(theta.value().values(), layer.config.r);
    const auto pi = routing::masked_gate_values(theta.value().values(), mask);
    const auto d = routing::argmax_index(pi);
    auto expected = expert_forward(layer.experts[d], x);
    for (auto& v : expected.values()) v *= pi[d];
    const auto y = moe_forward(layer, x, Mode::infer, rng);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(y[k], expected[k], 1e-15);
  }
}

TEST(MoELayer, InferenceConsumesNoRandomness) {
  const auto layer = make_layer(Kind::sparsemixer, 4, 3, 5);
  Rng rng(11), fresh(11);
  Rng data(1);
  for (int k = 0; k < 10; ++k) moe_forward(layer, random_vector(3, data), Mode::infer, rng);
  EXPECT_EQ(rng.next(), fresh.next());
}

TEST(MoELayer, NoScaleGatePassesExpertThrough) {
  auto cfg = EstimatorConfig::defaults_for(Kind::neglect);
  cfg.scale_gate = false;
  Rng init(6), rng(7);
  const auto layer = MoELayer::init(2, 2, 4, cfg, init);
  const auto x = Tensor::vector({0.3, -0.8});
  RoutingRecord rec(2);
  const auto y = moe_forward(layer, x, Mode::train, rng, &rec);
  EXPECT_EQ(y, expert_forward(layer.experts[rec.decisions[0].expert], x));
}

TEST(MoELayer, SaturatedRouterSendsEverythingToOneExpert) {
  auto layer = make_layer(Kind::sparsemixer, 2, 1, 8);
  layer.w_router = Tensor::matrix({{10.0}, {-10.0}});
  Rng rng(1);
  RoutingRecord rec(2);
  for (int k = 0; k < 50; ++k) moe_forward(layer, Tensor::vector({1.0}), Mode::train, rng, &rec);
  EXPECT_EQ(rec.load[0], 50u);
  EXPECT_DOUBLE_EQ(rec.max_load_fraction(), 1.0);
}

TEST(MoELayer, ExpertCallCounters) {
  Rng data(2);
  for (Kind k : estimators::kAllKinds) {
    const auto layer = make_layer(k, 4, 3, 9);
    Rng rng(3);
    RoutingRecord rec(4);
    for (int t = 0; t < 25; ++t) moe_forward(layer, random_vector(3, data), Mode::train, rng, &rec);
    EXPECT_EQ(rec.tokens(), 25u);
    EXPECT_EQ(rec.expert_calls, estimators::is_dense(k) ? 100u : 25u) << estimators::kind_name(k);
    RoutingRecord inf(4);
    for (int t = 0; t < 25; ++t) moe_forward(layer, random_vector(3, data), Mode::infer, rng, &inf);
    EXPECT_EQ(inf.expert_calls, 25u);
  }
}

TEST(LoadBalance, Examples) {
  const std::vector<std::size_t> uniform_load{5, 5};
  const std::vector<double> half{0.5, 0.5};
  EXPECT_DOUBLE_EQ(load_balance_value(uniform_load, half), 1.0);
  const std::vector<std::size_t> collapsed{0, 0, 8, 0};
  const std::vector<double> peaked{0.0, 0.0, 1.0, 0.0};
  EXPECT_DOUBLE_EQ(load_balance_value(collapsed, peaked), 4.0);
  const std::vector<std::size_t> empty{0, 0};
  EXPECT_THROW(load_balance_value(empty, half), std::invalid_argument);
  RoutingRecord rec(2);
  EXPECT_THROW(load_balance_loss(rec, 2), std::invalid_argument);
}

TEST(LoadBalance, TapeMatchesValue) {
  const auto layer = make_layer(Kind::sparsemixer, 3, 2, 12);
  Rng rng(1), data(2);
  ad::Tape tape;
  const auto vars = bind(tape, layer);
  RoutingRecord rec(3);
  for (int t = 0; t < 16; ++t) moe_forward_token(layer, vars, tape.constant(random_vector(2, data)), Mode::train, rng, rec);
  EXPECT_NEAR(load_balance_loss(rec, 3).value().item(),
              load_balance_value(rec.load, rec.mean_gate_mass()), 1e-14);
}

TEST(FoldOmega, OnesIsIdentity) {
  const auto layer = make_layer(Kind::sparsemixer, 3, 4, 13);
  const auto folded = fold_omega(layer);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(folded.experts[e].v, layer.experts[e].v);
}

TEST(FoldOmega, ScalesOutputProjection) {
  auto layer = make_layer(Kind::sparsemixer, 2, 2, 14);
  layer.omega = Tensor::filled({2}, 2.0);
  const auto folded = fold_omega(layer);
  for (std::size_t e = 0; e < 2; ++e)
    for (std::size_t i = 0; i < folded.experts[e].v.size(); ++i)
      EXPECT_EQ(folded.experts[e].v[i], 2.0 * layer.experts[e].v[i]);
  EXPECT_EQ(folded.omega, Tensor::filled({2}, 1.0));
}

TEST(FoldOmega, PreservesInferenceOutputs) {
  for (auto mode : {OmegaMode::per_dimension, OmegaMode::per_expert}) {
    auto layer = make_layer(Kind::sparsemixer, 4, 3, 15);
    layer.omega_mode = mode;
    Rng w(16);
    layer.omega = random_vector(mode == OmegaMode::per_dimension ? 3 : 4, w);
    const auto folded = fold_omega(layer);
    const auto twice = fold_omega(folded);
    Rng data(17), rng(0);
    for (int t = 0; t < 100; ++t) {
      const auto x = random_vector(3, data);
      const auto a = moe_forward(layer, x, Mode::infer, rng);
      const auto b = moe_forward(folded, x, Mode::infer, rng);
      for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    }
    for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(twice.experts[e].v, folded.experts[e].v);
  }
}

TEST(MoELayer, SampledForwardMatchesExactObjective) {
  // Neglect without mask or omega samples D ~ pi, so E[g(y)] = sum_D pi_D g(pi_D f_D).
  auto cfg = EstimatorConfig::defaults_for(Kind::neglect);
  cfg.use_mask = false;
  cfg.use_omega = false;
  Rng init(21);
  const auto layer = MoELayer::init(3, 2, 4, cfg, init, 1.0);
  const auto x = Tensor::vector({0.6, -1.1});

  ad::Tape tape;
  auto theta = routing::router_logits(tape.constant(layer.w_router), tape.constant(x));
  oracle::SmallInstance inst;
  inst.theta.assign(theta.value().values().begin(), theta.value().values().end());
  for (const auto& e : layer.experts) {
    const auto f = expert_forward(e, x);
    inst.experts.emplace_back(f.values().begin(), f.values().end());
  }
  inst.g = oracle::Downstream::squared_norm(2);
  const double exact = oracle::exact_loss(inst);

  Rng rng(22);
  constexpr int kDraws = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const auto y = moe_forward(layer, x, Mode::train, rng);
    const double v = inst.g.value(y.values());
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / kDraws;
  const double se = std::sqrt((sum_sq / kDraws - mean * mean) / kDraws);
  EXPECT_LE(std::abs(mean - exact), 3.0 * se);
}

TEST(Network, NeglectAndSparseMixerAgreeAtInit) {
  Rng a(31), b(31), data(32);
  const auto n1 = Network::init(4, 3, 6, 2, EstimatorConfig::defaults_for(Kind::neglect), a);
  const auto n2 = Network::init(4, 3, 6, 2, EstimatorConfig::defaults_for(Kind::sparsemixer), b);
  Tensor inputs = Tensor::zeros({64, 3}), targets = Tensor::zeros({64, 2});
  for (auto& v : inputs.values()) v = data.normal();
  for (auto& v : targets.values()) v = data.normal();
  EXPECT_EQ(evaluate_loss(n1, inputs, targets, TaskKind::regression),
            evaluate_loss(n2, inputs, targets, TaskKind::regression));
}

TEST(Network, BatchObjectiveRejectsEmptyBatch) {
  Rng rng(1);
  const auto net = Network::init(2, 2, 4, 1, EstimatorConfig::defaults_for(Kind::sparsemixer), rng);
  ad::Tape tape;
  const auto vars = bind(tape, net);
  std::vector<std::size_t> rows;
  EXPECT_THROW(batch_objective(net, vars, tape, Tensor::zeros({1, 2}), Tensor::zeros({1, 1}), rows,
                               TaskKind::regression, Mode::train, 0.01, rng),
               std::invalid_argument);
}

TEST(Network, ReinforceSurrogateLeavesObjectiveValue) {
  Rng init(41), data(42);
  const auto net = Network::init(3, 2, 4, 1, EstimatorConfig::defaults_for(Kind::reinforce), init);
  Tensor inputs = Tensor::zeros({8, 2}), targets = Tensor::zeros({8, 1});
  for (auto& v : inputs.values()) v = data.normal();
  for (auto& v : targets.values()) v = data.normal();
  std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5, 6, 7};
  ad::Tape tape;
  const auto vars = bind(tape, net);
  Rng rng(43);
  const auto res = batch_objective(net, vars, tape, inputs, targets, rows, TaskKind::regression,
                                   Mode::train, 0.0, rng);
  EXPECT_NEAR(res.objective.value().item(), res.task_loss, 1e-15);
}
