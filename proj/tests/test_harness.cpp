// Experiment harness: config serialization, staged artifacts, resume,
// determinism of reports, defense-section gating, and the CLI surface.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hgl/errors.hpp"
#include "hgl/experiment.hpp"

#include "test_util.hpp"

using namespace hgl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Desk-scale config that runs the full generative pipeline in a few seconds.
ExperimentConfig smoke_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.dataset.types = {{"paper", 120, 8, 0.0}, {"author", 80, 8, 6.0}, {"subject", 60, 6, 3.0}};
  cfg.dataset.relations = {{"paper", "author", 3.0, 2.5},
                           {"author", "paper", 4.0, 2.5},
                           {"author", "subject", 3.0, 2.5},
                           {"paper", "subject", 2.0, 2.5}};
  cfg.dataset.primary = "paper";
  cfg.dataset.trigger = "author";
  cfg.dataset.num_classes = 3;
  cfg.dataset.class_signal = 3.0;
  cfg.dataset.primary_class_scale = 1.0;
  cfg.dataset.feature_noise = 1.0;
  cfg.dataset.homophily = 0.8;
  cfg.train.epochs = 30;
  cfg.bilevel.iterations = 5;
  cfg.bilevel.inner_steps = 2;
  cfg.bilevel.victim_batch = 8;
  cfg.refine.steps = 10;
  cfg.trial_seeds = {1};
  cfg.out_dir = out_dir;
  return cfg;
}

std::string scratch(const std::string& leaf) {
  std::string root = (fs::temp_directory_path() / "hgl_harness_tests").string();
  fs::create_directories(root);
  std::string dir = root + "/" + leaf;
  fs::remove_all(dir);
  return dir;
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(HGL_BIN) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

}  // namespace

TEST_CASE("experiment config survives a JSON round-trip with every field intact") {
  ExperimentConfig cfg = smoke_config(scratch("roundtrip_out"));
  cfg.dataset.target_class = 1;
  cfg.splits = SplitFractions{0.6, 0.25, 0.15, 0.04};
  cfg.classifier = ClassifierConfig{24, 3};
  cfg.train.optimizer.lr = 5e-3;
  cfg.generator.noise_dim = 9;
  cfg.generator.tau = 0.25;
  cfg.generator.use_adain = false;
  cfg.generator.triggers_per_victim = 2;
  cfg.bilevel.lambda_div = 0.5;
  cfg.bilevel.generator_opt.clip_norm = 2.0;
  cfg.refine.lambda_attack = 0.7;
  cfg.refine.bandwidth_scales = {0.25, 1.0, 4.0};
  cfg.refine.mmd_reference = "raw";
  cfg.defense.pca_dim = 3;
  cfg.defense.od_fraction = 0.2;
  cfg.pool_fold = 4;
  cfg.attack = "naive";
  cfg.use_refinement = false;
  cfg.defense_csd = false;
  cfg.defense_prune = true;
  cfg.defense_od = true;
  cfg.trial_seeds = {7, 9, 11};
  cfg.graph_path = "some/graph.json";

  std::string p = scratch("roundtrip") + ".json";
  save_experiment_json(p, cfg);
  ExperimentConfig back = load_experiment_json(p);
  CHECK(experiment_json_string(back) == experiment_json_string(cfg));
  CHECK(back.dataset.types.size() == 3);
  CHECK(back.dataset.types[1].mean_scale == 6.0);
  CHECK(back.splits.poison == 0.04);
  CHECK(back.classifier.layers == 3);
  CHECK(back.generator.noise_dim == 9);
  CHECK(back.generator.use_adain == false);
  CHECK(back.bilevel.lambda_div == 0.5);
  CHECK(back.refine.bandwidth_scales == std::vector<double>{0.25, 1.0, 4.0});
  CHECK(back.refine.mmd_reference == "raw");
  CHECK(back.attack == "naive");
  CHECK(back.trial_seeds == std::vector<std::uint64_t>{7, 9, 11});
  CHECK(back.graph_path == "some/graph.json");
}

TEST_CASE("config loading and validation reject what they should") {
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_experiment_json("/nonexistent/cfg.json"), ConfigError);
  }
  SUBCASE("malformed JSON") {
    std::string p = scratch("bad") + ".json";
    std::ofstream(p) << "{ this is not json";
    CHECK_THROWS_AS(load_experiment_json(p), ConfigError);
  }
  SUBCASE("unknown attack name") {
    ExperimentConfig cfg = smoke_config(scratch("v1"));
    cfg.attack = "bogus";
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SUBCASE("pool fold must be positive") {
    ExperimentConfig cfg = smoke_config(scratch("v2"));
    cfg.pool_fold = 0;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SUBCASE("trial seeds must be non-empty and distinct") {
    ExperimentConfig cfg = smoke_config(scratch("v3"));
    cfg.trial_seeds = {};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg.trial_seeds = {4, 4};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SUBCASE("split fractions must sum to one") {
    ExperimentConfig cfg = smoke_config(scratch("v4"));
    cfg.splits.train = 0.9;  // 0.9 + 0.2 + 0.1 != 1
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SUBCASE("empty out_dir") {
    ExperimentConfig cfg = smoke_config("");
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
}

TEST_CASE("pipeline reports are byte-identical across directories, reruns, and resume") {
  ExperimentConfig a = smoke_config(scratch("det_a"));
  a.trial_seeds = {1, 2};
  run_pipeline(a);
  std::string report_a = slurp(a.out_dir + "/report.json");
  std::string csv_a = slurp(a.out_dir + "/report.csv");

  // Reports never embed timing or the output location.
  CHECK(report_a.find("runtime") == std::string::npos);
  CHECK(report_a.find("det_a") == std::string::npos);

  SUBCASE("fresh directory, same config") {
    ExperimentConfig b = smoke_config(scratch("det_b"));
    b.trial_seeds = {1, 2};
    run_pipeline(b);
    CHECK(slurp(b.out_dir + "/report.json") == report_a);
    CHECK(slurp(b.out_dir + "/report.csv") == csv_a);
  }
  SUBCASE("in-place rerun without resume recomputes to the same bytes") {
    run_pipeline(a);
    CHECK(slurp(a.out_dir + "/report.json") == report_a);
  }
  SUBCASE("resume reuses artifacts and reproduces the report") {
    fs::remove(a.out_dir + "/report.json");
    fs::remove(a.out_dir + "/trial_1/eval.json");
    fs::remove(a.out_dir + "/trial_1/backdoored_model.json");
    run_pipeline(a, /*resume=*/true);
    CHECK(slurp(a.out_dir + "/report.json") == report_a);
    CHECK(slurp(a.out_dir + "/report.csv") == csv_a);
  }
  SUBCASE("resume refuses a directory produced by a different config") {
    ExperimentConfig changed = a;
    changed.train.epochs += 1;
    CHECK_THROWS_AS(run_pipeline(changed, /*resume=*/true), ConfigError);
  }
}

TEST_CASE("disabled defenses leave no defense sections in the report") {
  ExperimentConfig cfg = smoke_config(scratch("nodef"));
  cfg.defense_csd = false;
  run_pipeline(cfg);
  std::string report = slurp(cfg.out_dir + "/report.json");
  CHECK(report.find("\"defenses\"") == std::string::npos);
  CHECK(report.find("post_asr") == std::string::npos);
  CHECK(report.find("\"csd\"") == std::string::npos);
}

TEST_CASE("naive attack pipeline produces a full report without generator artifacts") {
  ExperimentConfig cfg = smoke_config(scratch("naive"));
  cfg.attack = "naive";
  cfg.use_refinement = false;
  PipelineResult res = run_pipeline(cfg);
  REQUIRE(res.trials.size() == 1);
  CHECK(res.trials[0].eval.n_victims > 0);
  CHECK(fs::exists(cfg.out_dir + "/trial_1/eval.json"));
  CHECK(!fs::exists(cfg.out_dir + "/trial_1/generator.json"));
  std::string report = slurp(cfg.out_dir + "/report.json");
  CHECK(report.find("\"attack\": \"naive\"") != std::string::npos);
}

TEST_CASE("CLI: staged subcommands reproduce the library pipeline byte for byte") {
  // Library reference run.
  ExperimentConfig ref = smoke_config(scratch("cli_ref"));
  run_pipeline(ref);
  std::string report_ref = slurp(ref.out_dir + "/report.json");

  // The same config driven stage by stage through the executable.
  ExperimentConfig cli = smoke_config(scratch("cli_run"));
  std::string cfg_path = scratch("cli_cfg") + ".json";
  save_experiment_json(cfg_path, cli);
  for (const char* stage : {"generate-data", "train-clean", "build-pool", "attack",
                            "refine", "evaluate", "defend", "report"}) {
    INFO(stage);
    REQUIRE(run_cli(std::string(stage) + " --config " + cfg_path + " --stage-resume") == 0);
  }
  CHECK(slurp(cli.out_dir + "/report.json") == report_ref);

  SUBCASE("the run subcommand with --out matches as well") {
    std::string out = scratch("cli_run_all");
    REQUIRE(run_cli("run --config " + cfg_path + " --out " + out) == 0);
    CHECK(slurp(out + "/report.json") == report_ref);
  }
}

TEST_CASE("CLI: exit codes distinguish success from failure") {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("no-such-subcommand") != 0);
  CHECK(run_cli("run --config /nonexistent/cfg.json") != 0);
  // A config that fails validation must not exit 0.
  ExperimentConfig bad = smoke_config(scratch("cli_bad"));
  bad.pool_fold = 0;
  std::string p = scratch("cli_bad_cfg") + ".json";
  save_experiment_json(p, bad);
  CHECK(run_cli("run --config " + p) != 0);
}
