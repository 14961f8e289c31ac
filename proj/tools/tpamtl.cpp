// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "app/commands.hpp"
#include "app/experiment.hpp"

namespace fs = std::filesystem;
using namespace tpamtl;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  std::size_t workers = 0;
};

void add_common(CLI::App* cmd, Common& c, bool workers) {
  cmd->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "Output directory (default: eval.output_dir, then $TPAMTL_OUTPUT_ROOT/<config name>)");
  cmd->add_option("-s,--set", c.overrides, "Override a config key, e.g. --set train.max_epochs=5");
  if (workers) cmd->add_option("-j,--workers", c.workers, "Parallel cells (overrides eval.workers)")->check(CLI::PositiveNumber);
}

app::ExperimentConfig load(const Common& c) {
  auto overrides = c.overrides;
  if (c.workers > 0) overrides.push_back("eval.workers=" + std::to_string(c.workers));
  return app::load_experiment(c.config, overrides);
}

fs::path output_of(const Common& c, const app::ExperimentConfig& config) {
  return app::resolve_output(c.out.empty() ? std::nullopt : std::optional<fs::path>(c.out), config,
                             fs::path(c.config).stem().string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Multi-task temporal models with uncertainty-gated transfer"};
  cli.require_subcommand(1);

  Common gen_opts, run_opts;
  auto* gen = cli.add_subcommand("generate", "Generate or ingest the dataset of an experiment");
  add_common(gen, gen_opts, false);
  auto* run = cli.add_subcommand("run", "Train every variant, grid cell and seed; resumes completed cells");
  add_common(run, run_opts, true);

  std::string analyze_dir;
  std::optional<std::size_t> instances;
  auto* analyze = cli.add_subcommand("analyze", "Result tables, transfer graphs and uncertainty correlations");
  analyze->add_option("dir", analyze_dir, "Experiment directory written by 'run'")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("-n,--instances", instances, "Test instances to export per run (default: eval.graph_instances)");

  std::string checkpoint;
  auto* inspect = cli.add_subcommand("inspect-checkpoint", "Summarize a model checkpoint");
  inspect->add_option("path", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const auto config = load(gen_opts);
      app::generate_command(config, output_of(gen_opts, config), std::cout);
      return 0;
    }
    if (*run) {
      const auto config = load(run_opts);
      const auto out = output_of(run_opts, config);
      std::cout << "output: " << out.string() << "\n";
      const auto summary = app::run_command(config, out, std::cout);
      if (!summary.failed.empty()) {
        std::cerr << summary.failed.size() << " cell(s) failed:\n";
        for (const auto& f : summary.failed) std::cerr << "  " << f << "\n";
        return 1;
      }
      return 0;
    }
    if (*analyze) {
      const auto config = app::load_saved_experiment(analyze_dir);
      const auto summary =
          app::analyze_command(analyze_dir, instances.value_or(config.eval.graph_instances), std::cout);
      return summary.missing.empty() ? 0 : 1;
    }
    if (*inspect) {
      app::inspect_checkpoint_command(checkpoint, std::cout);
      return 0;
    }
  } catch (const model::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
