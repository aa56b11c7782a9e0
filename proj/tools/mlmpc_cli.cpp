#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlmpc/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  bool check = false;
};

int run(const std::string& name, const Options& o) {
  using namespace mlmpc::harness;
  Config cfg = o.config.empty() ? Config{} : Config::load(o.config);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw mlmpc::Error(mlmpc::ErrorKind::InvalidArgument, "--set expects key=value: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  const RunContext ctx = RunContext::from(cfg, o.seed, o.out ? std::optional<fs::path>(*o.out) : std::nullopt);
  const ExperimentResult r = run_experiment(name, ctx);
  std::cout << r.report.dump(2) << "\n";
  for (const auto& line : r.checks) std::cout << line << "\n";
  return o.check && !r.passed ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned residual models for adaptive MPC: experiment driver"};
  app.require_subcommand(1);
  Options opt;
  std::string chosen;
  for (const auto& name : mlmpc::harness::experiment_names()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", opt.config, "config file (key = value)")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "seed (overrides the config)");
    sub->add_option("--out", opt.out, "output directory (overrides the config)");
    sub->add_option("--set", opt.overrides, "override a config entry, key=value (repeatable)");
    sub->add_flag("--check", opt.check, "exit with status 2 when an acceptance check fails");
    sub->callback([&chosen, name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    return run(chosen, opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
