#include "hypolab/ensemble.hpp"
#include "hypolab/errors.hpp"
#include "hypolab/harness/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace hypolab;

int main(int argc, char** argv) {
  CLI::App app{"hypo-lab: Hormander brackets, Malliavin matrices and tail estimators for SDEs"};
  app.set_version_flag("--version", harness::tool_version());
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  const std::vector<std::pair<std::string, std::string>> descriptions = {
      {"check-hormander", "evaluate V_L on a grid of points and report the bracket condition"},
      {"simulate", "simulate X, J and K and write ensemble summaries"},
      {"malliavin", "Malliavin covariance C(T), Q(T) and D_0 X(T) per path"},
      {"tails", "small-ball tail curve of lambda_min of C or Q"},
      {"remainder-tails", "tail curve of the truncated chaos remainder"},
      {"det-moments", "inverse moments of det Q(t) and their small-time slope"},
      {"density", "kernel density of X(t) and the envelope check"},
      {"probe-assumptions", "sampled checks of monotonicity, growth and moment bounds"},
  };
  for (const auto& [name, text] : descriptions) {
    auto* sub = app.add_subcommand(name, text);
    sub->add_option("--config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
    sub->add_option("--seed", seed, "seed (overrides simulation.seed)");
    sub->add_option("--workers", workers, "worker threads (falls back to HYPO_LAB_WORKERS)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : harness::kExitConfig;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  harness::ExperimentConfig cfg;
  harness::RunOptions opts;
  try {
    cfg = harness::load_config(config_path);
    if (seed) cfg.simulation.seed = *seed;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (!cfg.output_dir) cfg.output_dir = "out/" + sub;
    opts.out_dir = *cfg.output_dir;
    opts.workers = resolve_workers(workers);
  } catch (const ConfigError& e) {
    std::cerr << "hypo-lab: config error: " << e.what() << "\n";
    return harness::kExitConfig;
  }

  const auto res = harness::run(sub, cfg, opts);
  if (res.exit_code == harness::kExitConfig) {
    std::cerr << "hypo-lab: config error: " << res.message << "\n";
    return res.exit_code;
  }
  for (const auto& f : res.files) std::cout << f.sha256 << "  " << (opts.out_dir / f.name).string() << "\n";
  std::cout << "manifest: " << (opts.out_dir / "manifest.json").string() << "\n";
  if (res.exit_code != harness::kExitOk) std::cerr << "hypo-lab: " << res.message << "\n";
  return res.exit_code;
}
