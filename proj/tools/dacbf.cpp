// Batch front-end: one subcommand per pipeline stage.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "dacbf/pipeline.hpp"

namespace {

using Stage = void (*)(const dacbf::RunContext&);

int run_stage(Stage stage, const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
              unsigned jobs) {
  try {
    auto cfg = config.empty() ? dacbf::PipelineConfig{} : dacbf::load_config(config);
    if (seed) cfg.seed = *seed;
    const dacbf::RunContext ctx(cfg, out, jobs);
    stage(ctx);
    return dacbf::kExitOk;
  } catch (const dacbf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return dacbf::kExitConfig;
  } catch (const dacbf::ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << '\n';
    return dacbf::kExitArtifact;
  } catch (const dacbf::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return dacbf::kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dacbf::kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-attributed adaptive CBF pipeline"};
  app.require_subcommand(1);
  std::string config, out = "out";
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  app.add_option("--config", config, "sectioned key = value config file (defaults when omitted)");
  app.add_option("--out", out, "artifact directory")->capture_default_str();
  app.add_option("--seed", seed, "overrides run.seed everywhere");
  app.add_option("--jobs", jobs, "worker thread cap")->check(CLI::PositiveNumber)->capture_default_str();

  const std::map<std::string, std::pair<Stage, std::string>> stages{
      {"generate", {dacbf::cmd_generate, "simulate labeled encounters -> dataset.jsonl"}},
      {"train", {dacbf::cmd_train, "train the baseline ensemble -> model_baseline.bin, train_log.csv"}},
      {"attribute", {dacbf::cmd_attribute, "TracIn terms and scores -> influence.csv"}},
      {"curate", {dacbf::cmd_curate, "removal sets for the sweep and ablations -> curation.json"}},
      {"retrain", {dacbf::cmd_retrain, "retrain on every curated set -> model_<tag>.bin"}},
      {"evaluate", {dacbf::cmd_evaluate, "error tables -> rmse_table.csv, ablation.csv, metrics.json"}},
      {"certify", {dacbf::cmd_certify, "certificate constants and sets -> certificate.json, certified_grid.csv"}},
      {"simulate", {dacbf::cmd_simulate, "closed-loop benchmark -> closed_loop.json/.csv, trajectories/"}},
      {"report", {dacbf::cmd_report, "tables and plots -> report/"}},
      {"all", {dacbf::cmd_all, "every stage in order"}}};
  for (const auto& [name, s] : stages) app.add_subcommand(name, s.second);

  // config errors in flags map to the config exit code as well
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dacbf::kExitConfig;
  }
  for (const auto& [name, s] : stages)
    if (app.got_subcommand(name)) return run_stage(s.first, config, out, seed, jobs);
  return dacbf::kExitFailure;
}
