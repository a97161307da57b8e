// moegradlab: train / biasvar / order / odecheck front-end.
// Exit codes: 0 success, 1 invalid config, 2 numerical divergence.

#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "moegrad/config.hpp"
#include "moegrad/harness.hpp"
#include "moegrad/parallel.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kBadConfig = 1;
constexpr int kDiverged = 2;

template <typename Rows>
int emit(const std::string& out, const Rows& rows) {
  if (out.empty() || out == "-") {
    moegrad::harness::write_csv(std::cout, std::span(rows));
    return kOk;
  }
  std::ofstream os(out, std::ios::binary);
  if (!os) {
    std::cerr << "error: cannot write '" << out << "'\n";
    return kBadConfig;
  }
  moegrad::harness::write_csv(os, std::span(rows));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace moegrad;
  CLI::App app{"Routing-gradient estimator lab for top-1 mixture-of-experts layers"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  int jobs = 0;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "experiment config (JSON)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_path, "output CSV path ('-' for stdout)")->default_val("-");
    sub->add_option("--jobs", jobs, "worker threads (1 = serial reference path)")->default_val(0);
  };
  auto* train = app.add_subcommand("train", "train the MoE network and log metrics");
  auto* biasvar = app.add_subcommand("biasvar", "bias and variance of every estimator on one instance");
  auto* order = app.add_subcommand("order", "bias order of accuracy under output scaling");
  auto* odecheck = app.add_subcommand("odecheck", "one-step Euler / midpoint error table");
  add_common(train, true);
  add_common(biasvar, true);
  add_common(order, true);
  add_common(odecheck, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kBadConfig;
  }

  const auto exec = jobs == 1 ? par::Exec::serial : par::Exec::omp;
  par::set_threads(jobs);

  try {
    if (odecheck->parsed()) return emit(out_path, harness::run_ode_check());

    const auto config = harness::parse_config(config_path);
    for (const auto& note : config.notes) std::cerr << "note: " << note << '\n';

    if (train->parsed()) {
      const auto result = harness::run_train(config, exec);
      const int rc = emit(out_path, result.sorted_rows());
      if (rc != kOk) return rc;
      if (result.diverged()) {
        for (const auto& r : result.runs)
          if (r.diverged)
            std::cerr << "error: " << r.estimator << " seed " << r.seed
                      << " diverged (non-finite loss)\n";
        return kDiverged;
      }
      return kOk;
    }
    if (biasvar->parsed()) return emit(out_path, harness::run_biasvar(config, exec));
    if (order->parsed()) return emit(out_path, harness::run_order_study(config, exec));
  } catch (const harness::ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kBadConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kBadConfig;
  }
  return kOk;
}
