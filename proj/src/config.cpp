#include "moegrad/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"

namespace moegrad::harness {

using estimators::EstimatorConfig;
using estimators::Kind;
using json = nlohmann::json;

std::size_t ExperimentConfig::output_dim() const {
  if (task.d_out) return task.d_out;
  return task.kind == moe::TaskKind::regression ? 1 : regions();
}

namespace {

std::string join(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

// Reads keys of one JSON object and remembers which ones were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string path(const std::string& key) const { return join(path_, key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::uint64_t u64(const std::string& key, std::optional<std::uint64_t> fallback) {
    if (!has(key)) return required(key, fallback);
    const auto& v = raw(key);
    if (!v.is_number_unsigned())
      throw ConfigError(path(key), "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  std::size_t count(const std::string& key, std::optional<std::size_t> fallback, std::size_t min) {
    const auto v = u64(key, fallback);
    if (v < min) throw ConfigError(path(key), "must be at least " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }

  double number(const std::string& key, std::optional<double> fallback) {
    if (!has(key)) return required(key, fallback);
    const auto& v = raw(key);
    if (!v.is_number()) throw ConfigError(path(key), "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(path(key), "must be finite");
    return d;
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, std::optional<std::string> fallback) {
    if (!has(key)) return required(key, fallback);
    const auto& v = raw(key);
    if (!v.is_string()) throw ConfigError(path(key), "expected a string");
    return v.get<std::string>();
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError(path(item.key()), "unknown key");
  }

 private:
  template <typename T>
  T required(const std::string& key, const std::optional<T>& fallback) const {
    if (!fallback) throw ConfigError(path(key), "required key is missing");
    return *fallback;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

[[noreturn]] void bad_enum(const std::string& path, const std::string& value,
                           const std::string& allowed) {
  throw ConfigError(path, "invalid value '" + value + "' (expected one of " + allowed + ")");
}

Kind parse_kind_at(const std::string& path, const std::string& name) {
  const auto k = estimators::parse_kind(name);
  if (!k)
    bad_enum(path, name, "neglect, reinforce, st, stgs, sparsemixer1, sparsemixer2, sparsemixer");
  return *k;
}

EstimatorConfig parse_estimator(const json& j, const std::string& path, double r) {
  ObjectReader obj(j, path);
  const auto kind = parse_kind_at(obj.path("kind"), obj.string("kind", std::string("sparsemixer")));
  auto cfg = EstimatorConfig::defaults_for(kind);
  cfg.use_mask = obj.boolean("use_mask", cfg.use_mask);
  cfg.use_omega = obj.boolean("use_omega", cfg.use_omega);
  cfg.scale_gate = obj.boolean("scale_gate", cfg.scale_gate);
  const auto path_name = obj.string("nabla1_path", std::string("standard"));
  const auto p = estimators::parse_nabla1(path_name);
  if (!p) bad_enum(obj.path("nabla1_path"), path_name, "standard, none");
  cfg.nabla1_path = *p;
  cfg.tau = obj.number("tau", 1.0);
  cfg.r = r;
  obj.finish();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    // validate() reports "estimator.<field>: ..." or "jitter_r: ..."
    const auto colon = msg.find(": ");
    std::string field = colon == std::string::npos ? "" : msg.substr(0, colon);
    if (field.rfind("estimator.", 0) == 0) field = join(path, field.substr(10));
    else if (field.empty()) field = path;
    throw ConfigError(field, colon == std::string::npos ? msg : msg.substr(colon + 2));
  }
  return cfg;
}

TaskSpec parse_task(const json& j) {
  ObjectReader obj(j, "task");
  TaskSpec t;
  const auto kind = obj.string("kind", std::string("regression"));
  if (kind == "regression") t.kind = moe::TaskKind::regression;
  else if (kind == "classification") t.kind = moe::TaskKind::classification;
  else bad_enum(obj.path("kind"), kind, "regression, classification");
  t.n_train = obj.count("n_train", t.n_train, 1);
  t.n_eval = obj.count("n_eval", t.n_eval, 1);
  t.noise_std = obj.number("noise_std", t.noise_std);
  if (t.noise_std < 0.0) throw ConfigError(obj.path("noise_std"), "must be non-negative");
  t.num_regions = obj.count("num_regions", 0, 0);
  t.d_out = obj.count("d_out", 0, 0);
  obj.finish();
  return t;
}

OptimizerSpec parse_optimizer(const json& j) {
  OptimizerSpec o;
  auto set_kind = [&](const std::string& path, const std::string& name) {
    if (name == "sgd") o.kind = OptimizerKind::sgd;
    else if (name == "adam") o.kind = OptimizerKind::adam;
    else bad_enum(path, name, "sgd, adam");
  };
  if (j.is_string()) {
    set_kind("optimizer", j.get<std::string>());
    return o;
  }
  ObjectReader obj(j, "optimizer");
  set_kind(obj.path("kind"), obj.string("kind", std::string("adam")));
  if (o.kind == OptimizerKind::adam) {
    o.beta1 = obj.number("beta1", o.beta1);
    o.beta2 = obj.number("beta2", o.beta2);
    o.eps = obj.number("eps", o.eps);
    if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) throw ConfigError(obj.path("beta1"), "must lie in [0, 1)");
    if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) throw ConfigError(obj.path("beta2"), "must lie in [0, 1)");
    if (!(o.eps > 0.0)) throw ConfigError(obj.path("eps"), "must be positive");
  }
  obj.finish();
  return o;
}

StudySpec parse_study(const json& j) {
  ObjectReader obj(j, "study");
  StudySpec s;
  if (obj.has("epsilons")) {
    const auto& arr = obj.raw("epsilons");
    if (!arr.is_array() || arr.empty()) throw ConfigError(obj.path("epsilons"), "expected a non-empty array");
    s.epsilons.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto p = obj.path("epsilons") + "[" + std::to_string(i) + "]";
      if (!arr[i].is_number() || !(arr[i].get<double>() > 0.0))
        throw ConfigError(p, "expected a positive number");
      s.epsilons.push_back(arr[i].get<double>());
    }
  }
  s.instances = obj.count("instances", s.instances, 1);
  const auto fam = obj.string("downstream", std::string("cubic"));
  if (fam == "quadratic") s.downstream = oracle::DownstreamFamily::quadratic;
  else if (fam == "cubic") s.downstream = oracle::DownstreamFamily::cubic;
  else if (fam == "tanh") s.downstream = oracle::DownstreamFamily::tanh;
  else bad_enum(obj.path("downstream"), fam, "quadratic, cubic, tanh");
  s.mc_samples = obj.count("mc_samples", s.mc_samples, oracle::kMinStgsSamples);
  const auto inst = obj.string("instance", std::string("random"));
  if (inst == "reference") s.reference_instance = true;
  else if (inst != "random") bad_enum(obj.path("instance"), inst, "random, reference");
  if (obj.has("kinds")) {
    const auto& arr = obj.raw("kinds");
    if (!arr.is_array() || arr.empty()) throw ConfigError(obj.path("kinds"), "expected a non-empty array");
    s.order_kinds.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto p = obj.path("kinds") + "[" + std::to_string(i) + "]";
      if (!arr[i].is_string()) throw ConfigError(p, "expected a string");
      const auto k = parse_kind_at(p, arr[i].get<std::string>());
      if (k == Kind::stgs) throw ConfigError(p, "stgs has no enumerable expectation; not usable here");
      s.order_kinds.push_back(k);
    }
  }
  obj.finish();
  return s;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  ObjectReader obj(j, "");
  ExperimentConfig c;
  c.seed = obj.u64("seed", std::nullopt);
  c.num_experts = obj.count("num_experts", std::nullopt, 2);
  c.d_model = obj.count("d_model", std::nullopt, 1);
  c.d_hidden = obj.count("d_hidden", 0, 0);
  c.jitter_r = obj.number("jitter_r", routing::kDefaultJitter);
  if (!(c.jitter_r >= 0.0 && c.jitter_r < 1.0)) throw ConfigError("jitter_r", "must lie in [0, 1)");
  c.load_balance_coef = obj.number("load_balance_coef", 0.01);
  if (c.load_balance_coef < 0.0) throw ConfigError("load_balance_coef", "must be non-negative");

  if (obj.has("estimator")) {
    const auto& e = obj.raw("estimator");
    if (e.is_array()) {
      if (e.empty()) throw ConfigError("estimator", "expected at least one estimator");
      for (std::size_t i = 0; i < e.size(); ++i)
        c.estimators.push_back(parse_estimator(e[i], "estimator[" + std::to_string(i) + "]", c.jitter_r));
    } else {
      c.estimators.push_back(parse_estimator(e, "estimator", c.jitter_r));
    }
  } else {
    c.estimators.push_back(parse_estimator(json::object(), "estimator", c.jitter_r));
  }

  if (obj.has("task")) c.task = parse_task(obj.raw("task"));
  c.steps = obj.count("steps", c.steps, 1);
  c.batch_size = obj.count("batch_size", c.batch_size, 1);
  if (obj.has("optimizer")) c.optimizer = parse_optimizer(obj.raw("optimizer"));
  c.learning_rate = obj.number("learning_rate", c.learning_rate);
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate", "must be positive");
  c.replicas = obj.count("replicas", c.replicas, 1);
  c.log_every = obj.count("log_every", c.log_every, 1);

  const auto act = obj.string("expert_activation", std::string("tanh"));
  if (act == "tanh") c.expert_activation = moe::Activation::tanh;
  else if (act == "relu") c.expert_activation = moe::Activation::relu;
  else bad_enum("expert_activation", act, "tanh, relu");
  const auto om = obj.string("omega_mode", std::string("per_dimension"));
  if (om == "per_dimension") c.omega_mode = moe::OmegaMode::per_dimension;
  else if (om == "per_expert") c.omega_mode = moe::OmegaMode::per_expert;
  else bad_enum("omega_mode", om, "per_dimension, per_expert");

  if (obj.has("study")) c.study = parse_study(obj.raw("study"));
  obj.finish();

  if (c.task.kind == moe::TaskKind::classification && c.output_dim() < 2)
    throw ConfigError("task.d_out", "classification needs at least two classes");
  static constexpr std::size_t kSweep[] = {2, 4, 6, 8, 16};
  if (std::find(std::begin(kSweep), std::end(kSweep), c.num_experts) == std::end(kSweep))
    c.notes.push_back("num_experts = " + std::to_string(c.num_experts) +
                      " is outside the usual sweep {2, 4, 6, 8, 16}");
  return c;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot open config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace moegrad::harness
