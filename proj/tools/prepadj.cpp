// Command-line front end: simulate | estimate | sensitivity | report.
#include <CLI11.hpp>

#include <iostream>

#include "prepadj/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Preparedness-adjusted disparity estimation with sensitivity analysis"};
  app.require_subcommand(1, 1);

  std::string config_path;
  prepadj::CommandFlags flags;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run configuration (JSON)")->required();
    cmd->add_option("--out", out, "Output directory (overrides the config)");
    cmd->add_option("--seed", seed, "Master seed (overrides the config)");
    cmd->add_flag("--force", flags.force, "Overwrite existing outputs");
    cmd->add_option("--threads", threads, "Worker threads for bootstrap, CV and grid cells")
        ->check(CLI::PositiveNumber);
  };
  CLI::App* simulate = app.add_subcommand("simulate", "Generate a synthetic cohort CSV and truth JSON");
  CLI::App* estimate = app.add_subcommand(
      "estimate", "Fit the preparedness model, adjusted and baseline regressions, bootstrap CIs");
  CLI::App* sensitivity = app.add_subcommand(
      "sensitivity", "Propensity model and Rosenbaum-Rubin grid search (needs estimate outputs)");
  CLI::App* report = app.add_subcommand("report", "Render report.md from existing outputs");
  for (CLI::App* cmd : {simulate, estimate, sensitivity, report}) add_common(cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    prepadj::RunConfig config = prepadj::RunConfig::load(config_path);
    for (CLI::App* cmd : {simulate, estimate, sensitivity, report}) {
      if (!cmd->parsed()) continue;
      if (cmd->count("--out")) flags.out = out;
      if (cmd->count("--seed")) flags.seed = seed;
      if (cmd->count("--threads")) flags.threads = threads;
    }
    prepadj::apply_flags(config, flags);

    if (simulate->parsed()) {
      prepadj::cmd_simulate(config, flags.force);
    } else if (estimate->parsed()) {
      prepadj::cmd_estimate(config, flags.force);
    } else if (sensitivity->parsed()) {
      prepadj::cmd_sensitivity(config, flags.force);
    } else {
      std::cout << prepadj::cmd_report(config, flags.force);
    }
    return 0;
  } catch (const std::exception& e) {
    const int code = prepadj::exit_code_for(e);
    std::cerr << "prepadj: error: " << e.what() << '\n';
    return code;
  }
}
