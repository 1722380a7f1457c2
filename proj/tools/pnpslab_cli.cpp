// Command-line front end. Exit codes: 0 ok, 1 other failure, 2 config error,
// 3 numeric error.

#include "pnpslab/errors.hpp"
#include "pnpslab/runner.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace {

using namespace pnpslab;

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

ExperimentConfig resolve(const Globals& g, Experiment experiment) {
  ExperimentConfig config;
  config.experiment = experiment;
  if (!g.config.empty()) config = load_experiment_config(g.config, config);
  if (g.seed) config.seeds = {*g.seed};
  if (!g.out.empty()) config.output_dir = g.out;
  if (const char* env = std::getenv("PNPSLAB_OUT"); env && *env) config.output_dir = env;
  config.validate();
  return config;
}

int run(Experiment experiment, const Globals& g, const std::optional<std::string>& checkpoint) {
  ExperimentConfig config = resolve(g, experiment);
  if (g.threads < 1) throw ConfigError("--threads must be >= 1");
  const RunContext ctx{config.output_dir, g.threads};
  RunRecord record;
  switch (experiment) {
  case Experiment::PnpsReport: record = run_pnps_report(config, ctx).record; break;
  case Experiment::BiasSweep: record = run_bias_sweep(config, ctx).record; break;
  case Experiment::InlpSweep: record = run_inlp_sweep(config, ctx).record; break;
  case Experiment::CrossGroup: record = run_cross_group(config, ctx).record; break;
  case Experiment::MethodTable: record = run_method_table(config, ctx).record; break;
  case Experiment::Generate: record = run_generate(config, ctx); break;
  case Experiment::Train: record = run_train(config, ctx); break;
  case Experiment::Probe:
    record = run_probe(config, ctx, checkpoint ? std::optional<std::filesystem::path>(*checkpoint) : std::nullopt);
    break;
  }
  std::cout << to_string(experiment) << ": " << record.artifacts.size() << " artifacts in " << ctx.out_dir.string()
            << " (config " << record.content_hash.substr(0, 12) << ")\n"
            << record.summary.dump(2) << '\n';
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic spurious-feature lab: data, PN/PS oracle, training and representation analysis"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file; unknown keys are errors");
  app.add_option("--out", g.out, "Output directory (PNPSLAB_OUT takes precedence)");
  app.add_option("--seed", g.seed, "Run a single seed instead of the configured list");
  app.add_option("--threads", g.threads, "Worker threads for independent runs");

  std::optional<std::string> checkpoint;
  const std::vector<std::pair<Experiment, std::string>> commands{
      {Experiment::Generate, "generate"},       {Experiment::PnpsReport, "pnps"},
      {Experiment::Train, "train"},             {Experiment::Probe, "probe"},
      {Experiment::InlpSweep, "inlp"},          {Experiment::BiasSweep, "sweep"},
      {Experiment::CrossGroup, "cross-group"},  {Experiment::MethodTable, "method-table"},
  };
  const std::map<std::string, std::string> help{
      {"generate", "Write train/dev/test JSONL datasets"},
      {"pnps", "PN/PS of the reserved-token feature per task and label"},
      {"train", "Train one model per seed and save checkpoints"},
      {"probe", "MDL and linear-probe extractability of the feature"},
      {"inlp", "Iterative null-space projection on low- and high-PN features"},
      {"sweep", "Extractability across bias strengths"},
      {"cross-group", "Train on the feature-present group, test on both groups"},
      {"method-table", "Extractability under debiasing methods"},
  };
  std::optional<Experiment> chosen;
  for (const auto& [experiment, name] : commands) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    if (experiment == Experiment::Probe)
      sub->add_option("--checkpoint", checkpoint, "Model checkpoint to probe instead of training one");
    sub->callback([&chosen, e = experiment] { chosen = e; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    return run(*chosen, g, checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const ScheduleError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
