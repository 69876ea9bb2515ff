#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hgl/bilevel.hpp"
#include "hgl/candidates.hpp"
#include "hgl/defense.hpp"
#include "hgl/generator.hpp"
#include "hgl/metrics.hpp"
#include "hgl/refine.hpp"
#include "hgl/synth.hpp"

namespace hgl {

struct ExperimentConfig {
  SynthSpec dataset = SynthSpec::default_fixture();
  std::string graph_path;  // non-empty: load this graph instead of generating
  SplitFractions splits;
  ClassifierConfig classifier;
  TrainConfig train;
  GeneratorConfig generator;
  BilevelConfig bilevel;   // log_path is managed per trial
  RefineConfig refine;     // log_path is managed per trial
  DefenseConfig defense;   // seed is derived per trial
  int pool_fold = 6;
  std::string attack = "generative";  // or "naive"
  bool use_refinement = true;
  bool defense_csd = true;
  bool defense_prune = false;
  bool defense_od = false;
  std::vector<std::uint64_t> trial_seeds = {1, 2, 3};
  std::string out_dir = "runs/default";
};

void validate(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_json(const std::string& path);
void save_experiment_json(const std::string& path, const ExperimentConfig& cfg);
// Canonical serialized form, used for checkpoint-compatibility checks.
std::string experiment_json_string(const ExperimentConfig& cfg);

struct DefenseEval {
  std::string name;  // "csd" | "prune" | "od"
  double post_asr = 0.0;
  double post_accuracy = 0.0;  // defense-retrained model on the clean test split
  double trigger_type_ratio = 0.0;
  double injected_pruned_fraction = 0.0;  // injected train triggers isolated
  int rectified = 0;
  int pruned_edges = 0;
};

struct TrialResult {
  std::uint64_t seed = 0;
  EvalReport eval;
  std::vector<DefenseEval> defenses;
  double runtime_seconds = 0.0;  // in-memory only, never serialized
};

// One trial's staged execution under <out_dir>/trial_<seed>. Every stage
// writes its artifact; with resume=true an existing artifact is loaded
// instead of recomputed (after the stored config snapshot is checked against
// the current config). Stages pull in their prerequisites, so each entry
// point below is independently callable.
class TrialRunner {
 public:
  TrialRunner(ExperimentConfig cfg, std::uint64_t seed, bool resume);
  ~TrialRunner();

  void stage_graph();
  void stage_splits();
  void stage_train_clean();
  void stage_pool();
  void stage_attack();    // bi-level optimization (generative attack only)
  void stage_refine();    // affine feature refinement
  void stage_poison();    // train/test deltas + backdoored model
  void stage_evaluate();  // ASR / CAD / diversity
  void stage_defend();    // enabled defenses, retrain, re-evaluate

  TrialResult run_all();
  const std::string& dir() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct AggregateStat {
  double mean = 0.0;
  double stddev = 0.0;  // sample std over trials (0 for a single trial)
  bool high_variance = false;  // stddev > 0.1
};

struct PipelineResult {
  std::vector<TrialResult> trials;
  AggregateStat asr, cad, diversity;
  std::vector<std::pair<std::string, AggregateStat>> defense_post_asr;
};

// Runs every trial seed end to end, then writes <out_dir>/report.json and
// <out_dir>/report.csv. Reports contain no timing data, so identical configs
// and seeds reproduce them byte for byte.
PipelineResult run_pipeline(const ExperimentConfig& cfg, bool resume = false);

// Aggregation over already-materialized trial artifacts (the `report` stage).
PipelineResult aggregate_reports(const ExperimentConfig& cfg);

}  // namespace hgl
