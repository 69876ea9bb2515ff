// Command-line harness for the attack/defense laboratory.
//
// Staged subcommands (generate-data .. evaluate, defend) operate per trial
// seed and write artifacts under <out_dir>/trial_<seed>/; `report` merges the
// per-trial artifacts into report.json / report.csv; `run` executes the whole
// pipeline for every configured seed.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hgl/experiment.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool stage_resume = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "experiment config JSON (defaults apply if omitted)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out_dir, "output directory (overrides the config's out_dir)");
  cmd->add_option("--seed", o.seed, "run only this trial seed (default: all configured seeds)")
      ->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_flag("--stage-resume", o.stage_resume,
                "reuse artifacts already present in the trial directory");
}

hgl::ExperimentConfig load_config(const CommonOpts& o) {
  hgl::ExperimentConfig cfg =
      o.config_path.empty() ? hgl::ExperimentConfig{} : hgl::load_experiment_json(o.config_path);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  return cfg;
}

std::vector<std::uint64_t> trial_seeds(const hgl::ExperimentConfig& cfg, const CommonOpts& o) {
  if (o.seed_set) return {o.seed};
  return cfg.trial_seeds;
}

template <class Stage>
int run_stage(const CommonOpts& o, const char* label, Stage stage) {
  hgl::ExperimentConfig cfg = load_config(o);
  for (std::uint64_t seed : trial_seeds(cfg, o)) {
    hgl::TrialRunner runner(cfg, seed, o.stage_resume);
    stage(runner);
    std::cout << label << ": trial " << seed << " done (" << runner.dir() << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heterogeneous-graph backdoor attack laboratory"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, pool_o, attack_o, refine_o, defend_o, eval_o, report_o, run_o;

  CLI::App* gen = app.add_subcommand("generate-data", "synthesize the graph and splits");
  add_common(gen, gen_o);
  CLI::App* train = app.add_subcommand("train-clean", "train the clean victim classifier");
  add_common(train, train_o);
  CLI::App* pool = app.add_subcommand("build-pool", "screen candidate pools");
  add_common(pool, pool_o);
  CLI::App* attack = app.add_subcommand("attack", "run the bi-level generator optimization");
  add_common(attack, attack_o);
  CLI::App* refine = app.add_subcommand("refine", "run the distribution-alignment refinement");
  add_common(refine, refine_o);
  CLI::App* defend = app.add_subcommand("defend", "apply enabled defenses and re-evaluate");
  add_common(defend, defend_o);
  CLI::App* eval = app.add_subcommand("evaluate", "poison, train the backdoored model, evaluate");
  add_common(eval, eval_o);
  CLI::App* report = app.add_subcommand("report", "aggregate per-trial results");
  add_common(report, report_o);
  CLI::App* run = app.add_subcommand("run", "full pipeline for every configured seed");
  add_common(run, run_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return run_stage(gen_o, "generate-data", [](hgl::TrialRunner& r) { r.stage_splits(); });
    if (train->parsed())
      return run_stage(train_o, "train-clean", [](hgl::TrialRunner& r) { r.stage_train_clean(); });
    if (pool->parsed())
      return run_stage(pool_o, "build-pool", [](hgl::TrialRunner& r) { r.stage_pool(); });
    if (attack->parsed())
      return run_stage(attack_o, "attack", [](hgl::TrialRunner& r) {
        r.stage_attack();
      });
    if (refine->parsed())
      return run_stage(refine_o, "refine", [](hgl::TrialRunner& r) { r.stage_refine(); });
    if (defend->parsed())
      return run_stage(defend_o, "defend", [](hgl::TrialRunner& r) { r.stage_defend(); });
    if (eval->parsed())
      return run_stage(eval_o, "evaluate", [](hgl::TrialRunner& r) { r.stage_evaluate(); });
    if (report->parsed()) {
      hgl::ExperimentConfig cfg = load_config(report_o);
      hgl::PipelineResult res = hgl::aggregate_reports(cfg);
      std::cout << "report: " << res.trials.size() << " trials aggregated -> " << cfg.out_dir
                << "/report.json\n";
      return 0;
    }
    if (run->parsed()) {
      hgl::ExperimentConfig cfg = load_config(run_o);
      if (run_o.seed_set) cfg.trial_seeds = {run_o.seed};
      hgl::PipelineResult res = hgl::run_pipeline(cfg, run_o.stage_resume);
      std::cout << "run: " << res.trials.size() << " trials -> " << cfg.out_dir
                << "/report.json (asr mean " << res.asr.mean << ", cad mean " << res.cad.mean
                << ")\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
