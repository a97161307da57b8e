#include "moegrad/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <tuple>

namespace moegrad::harness {

using estimators::EstimatorConfig;
using estimators::Kind;

// ---- optimizers -------------------------------------------------------------

Optimizer::Optimizer(const OptimizerSpec& spec, double learning_rate)
    : spec_(spec), lr_(learning_rate) {}

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: params/grads mismatch");
  ++t_;
  if (spec_.kind == OptimizerKind::sgd) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k]->values();
      const auto g = grads[k].values();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * g[i];
    }
    return;
  }
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
  }
  const double c1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->values();
    auto m = m_[k].values();
    auto v = v_[k].values();
    const auto g = grads[k].values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = spec_.beta1 * m[i] + (1.0 - spec_.beta1) * g[i];
      v[i] = spec_.beta2 * v[i] + (1.0 - spec_.beta2) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + spec_.eps);
    }
  }
}

std::vector<Tensor*> parameters(moe::Network& net) {
  std::vector<Tensor*> out{&net.moe.w_router};
  for (auto& e : net.moe.experts) {
    out.push_back(&e.u);
    out.push_back(&e.v);
  }
  if (net.moe.config.use_omega) out.push_back(&net.moe.omega);
  out.push_back(&net.w_out);
  out.push_back(&net.b_out);
  return out;
}

std::vector<ad::Var> parameter_vars(const moe::NetworkVars& vars, const moe::Network& net) {
  std::vector<ad::Var> out{vars.moe.w_router};
  for (std::size_t i = 0; i < vars.moe.u.size(); ++i) {
    out.push_back(vars.moe.u[i]);
    out.push_back(vars.moe.v[i]);
  }
  if (net.moe.config.use_omega) out.push_back(vars.moe.omega);
  out.push_back(vars.w_out);
  out.push_back(vars.b_out);
  return out;
}

// ---- training ---------------------------------------------------------------

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const std::size_t n = values.size();
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n / 2), values.end());
  const double hi = values[n / 2];
  if (n % 2) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

bool TrainResult::diverged() const {
  return std::any_of(runs.begin(), runs.end(), [](const ReplicaRun& r) { return r.diverged; });
}

std::vector<MetricsRow> TrainResult::sorted_rows() const {
  std::vector<MetricsRow> rows;
  for (const auto& r : runs) rows.insert(rows.end(), r.rows.begin(), r.rows.end());
  std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    return std::tie(a.estimator, a.seed, a.step) < std::tie(b.estimator, b.seed, b.step);
  });
  return rows;
}

namespace {

bool all_finite(std::span<const Tensor> ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

}  // namespace

ReplicaRun train_replica(const ExperimentConfig& config, const EstimatorConfig& estimator,
                         std::uint64_t seed) {
  using Clock = std::chrono::steady_clock;
  const auto task_kind = config.task.kind;
  const auto data = gen_synthetic(config.task, config.d_model, config.regions(),
                                  config.output_dim(), seed);

  Rng init_rng(seed, 10), route_rng(seed, 11), batch_rng(seed, 12);
  auto net = moe::Network::init(config.num_experts, config.d_model, config.hidden(),
                                config.output_dim(), estimator, init_rng);
  net.moe.activation = config.expert_activation;
  net.moe.omega_mode = config.omega_mode;
  if (config.omega_mode == moe::OmegaMode::per_expert)
    net.moe.omega = Tensor::filled({config.num_experts}, 1.0);
  net.moe.validate();

  Optimizer opt(config.optimizer, config.learning_rate);
  const auto params = parameters(net);

  ReplicaRun run;
  run.estimator = estimator.label();
  run.seed = seed;
  std::size_t last_logged = 0;
  std::vector<std::size_t> batch(config.batch_size);
  const std::size_t n_train = data.train_x.rows();

  for (std::size_t s = 0; s <= config.steps; ++s) {
    const bool log_now = s % config.log_every == 0 || s == config.steps;
    MetricsRow row;
    if (log_now) {
      row.step = s;
      row.seed = seed;
      row.estimator = run.estimator;
      row.train_loss = moe::evaluate_loss(net, data.train_x, data.train_y, task_kind);
      row.eval_loss = moe::evaluate_loss(net, data.eval_x, data.eval_y, task_kind);
      if (s > 0) {
        std::vector<double> recent(run.step_times_ms.begin() + static_cast<std::ptrdiff_t>(last_logged),
                                   run.step_times_ms.end());
        row.step_time_ms = median(std::move(recent));
      }
      last_logged = run.step_times_ms.size();
    }

    for (auto& r : batch) r = batch_rng.below(n_train);
    const auto t0 = Clock::now();
    ad::Tape tape;
    const auto vars = moe::bind(tape, net, true);
    auto obj = moe::batch_objective(net, vars, tape, data.train_x, data.train_y, batch, task_kind,
                                    moe::Mode::train, config.load_balance_coef, route_rng);
    bool finite = std::isfinite(obj.objective.value().item());
    if (s < config.steps && finite) {
      const auto grads_map = tape.backward(obj.objective);
      std::vector<Tensor> grads;
      for (const auto& v : parameter_vars(vars, net)) grads.push_back(grads_map.of(v));
      finite = all_finite(grads);
      if (finite) opt.step(params, grads);
    }
    const auto t1 = Clock::now();
    if (s < config.steps)
      run.step_times_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    run.expert_calls += obj.record.expert_calls;
    run.routed_tokens += obj.record.tokens();

    if (log_now || !finite) {
      if (!log_now) {
        row.step = s;
        row.seed = seed;
        row.estimator = run.estimator;
        row.train_loss = obj.task_loss;
        row.eval_loss = std::nan("");
      }
      row.lb_loss = obj.lb_loss;
      row.max_expert_load_fraction = obj.record.max_load_fraction();
      run.rows.push_back(row);
    }
    if (!finite || !std::isfinite(row.train_loss) || !std::isfinite(row.eval_loss)) {
      run.diverged = true;
      break;
    }
  }
  return run;
}

TrainResult run_train(const ExperimentConfig& config, par::Exec exec) {
  struct Job {
    const EstimatorConfig* est;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& e : config.estimators)
    for (std::size_t i = 0; i < config.replicas; ++i) jobs.push_back({&e, config.seed + i});
  TrainResult result;
  result.runs.resize(jobs.size());
  par::for_each_index(
      jobs.size(),
      [&](std::size_t j) { result.runs[j] = train_replica(config, *jobs[j].est, jobs[j].seed); },
      exec);
  return result;
}

// ---- oracle studies ---------------------------------------------------------

namespace {

void check_oracle_size(const ExperimentConfig& config) {
  if (config.num_experts > oracle::kMaxExperts)
    throw ConfigError("num_experts", "oracle studies enumerate at most " +
                                         std::to_string(oracle::kMaxExperts) + " experts, got " +
                                         std::to_string(config.num_experts));
}

}  // namespace

oracle::SmallInstance study_instance(const ExperimentConfig& config) {
  if (config.study.reference_instance) return oracle::reference_instance();
  check_oracle_size(config);
  Rng rng(config.seed, 20);
  return oracle::random_instance(rng, config.num_experts, config.d_model, config.study.downstream);
}

std::vector<oracle::SmallInstance> study_instances(const ExperimentConfig& config) {
  check_oracle_size(config);
  Rng rng(config.seed, 21);
  std::vector<oracle::SmallInstance> out;
  for (std::size_t i = 0; i < config.study.instances; ++i)
    out.push_back(oracle::random_instance(rng, config.num_experts, config.d_model,
                                          config.study.downstream));
  return out;
}

std::vector<BiasVarRow> run_biasvar(const ExperimentConfig& config, par::Exec exec) {
  const auto inst = study_instance(config);
  const double tau = config.estimators.front().tau;
  std::vector<BiasVarRow> rows;
  for (Kind kind : estimators::kAllKinds) {
    oracle::GradReport r;
    if (kind == Kind::stgs)
      r = par::stgs_expectation(inst, tau, config.study.mc_samples, config.seed, exec);
    else
      r = oracle::estimator_expectation(inst, EstimatorConfig::defaults_for(kind));
    rows.push_back({std::string(estimators::kind_name(kind)), r.bias_l2, r.rel_bias,
                    r.variance_trace, r.n_samples});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const BiasVarRow& a, const BiasVarRow& b) { return a.estimator < b.estimator; });
  return rows;
}

std::vector<OrderRow> run_order_study(const ExperimentConfig& config, par::Exec exec) {
  const auto insts = study_instances(config);
  const auto& eps = config.study.epsilons;
  std::vector<OrderRow> rows;
  for (Kind kind : config.study.order_kinds) {
    const auto studies = par::order_studies(insts, EstimatorConfig::defaults_for(kind), eps, exec);
    for (std::size_t k = 0; k < eps.size(); ++k) {
      OrderRow row{std::string(estimators::kind_name(kind)), eps[k], 0.0, std::nullopt};
      std::vector<double> biases, ratios;
      for (const auto& s : studies) {
        biases.push_back(s.bias_norms[k]);
        if (k < s.ratios.size() && s.ratios[k]) ratios.push_back(*s.ratios[k]);
      }
      row.bias_l2 = median(biases);
      if (!ratios.empty()) row.ratio = median(ratios);
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const OrderRow& a, const OrderRow& b) { return a.estimator < b.estimator; });
  return rows;
}

std::vector<OdeRow> run_ode_check() {
  // t0 = 0 would hide the leading error term of x^3 and tanh (g'' vanishes there).
  constexpr double kStart = 0.5;
  constexpr double kSteps[] = {1e-2, 5e-3, 2.5e-3};
  // Errors this small are rounding noise; a ratio of them means nothing.
  constexpr double kNoise = 1e-14;
  std::vector<OdeRow> rows;
  for (auto method : {oracle::OdeMethod::euler_endpoint, oracle::OdeMethod::midpoint}) {
    for (const auto& fn : oracle::builtin_functions()) {
      double prev = 0.0;
      for (std::size_t k = 0; k < std::size(kSteps); ++k) {
        const double err = oracle::ode_solver_error(fn, kStart, kStart + kSteps[k], method);
        OdeRow row{std::string(oracle::ode_method_name(method)), fn.name, kSteps[k], err, std::nullopt};
        if (k > 0 && err > kNoise && prev > kNoise) row.ratio = prev / err;
        prev = err;
        rows.push_back(row);
      }
    }
  }
  return rows;
}

// ---- CSV --------------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

}  // namespace

void write_csv(std::ostream& os, std::span<const MetricsRow> rows) {
  os << "step,seed,estimator,train_loss,eval_loss,lb_loss,step_time_ms,max_expert_load_fraction\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.seed << ',' << r.estimator << ',' << num(r.train_loss) << ','
       << num(r.eval_loss) << ',' << num(r.lb_loss) << ',' << num(r.step_time_ms) << ','
       << num(r.max_expert_load_fraction) << '\n';
}

void write_csv(std::ostream& os, std::span<const BiasVarRow> rows) {
  os << "estimator,bias_l2,rel_bias,variance_trace,n_samples\n";
  for (const auto& r : rows)
    os << r.estimator << ',' << num(r.bias_l2) << ',' << num(r.rel_bias) << ','
       << num(r.variance_trace) << ',' << r.n_samples << '\n';
}

void write_csv(std::ostream& os, std::span<const OrderRow> rows) {
  os << "estimator,epsilon,bias_l2,ratio\n";
  for (const auto& r : rows)
    os << r.estimator << ',' << num(r.epsilon) << ',' << num(r.bias_l2) << ',' << opt_num(r.ratio)
       << '\n';
}

void write_csv(std::ostream& os, std::span<const OdeRow> rows) {
  os << "method,function,h,error,ratio\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.function << ',' << num(r.h) << ',' << num(r.error) << ','
       << opt_num(r.ratio) << '\n';
}

}  // namespace moegrad::harness
