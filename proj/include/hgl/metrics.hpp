#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hgl/classifier.hpp"
#include "hgl/graph.hpp"

namespace hgl {

struct EvalReport {
  double asr = 0.0;
  double cad = 0.0;
  double diversity = 0.0;
  int n_victims = 0;   // victims scored (ground truth != target class)
  int n_excluded = 0;  // victims skipped because their ground truth IS the target
  // ASR deliberately excludes victims already labeled with the target class;
  // the flag records that convention in every serialized report.
  bool excludes_target_class_victims = true;
  std::vector<int> per_class_success;  // successes by ground-truth class
  std::vector<int> per_class_total;
  double clean_model_accuracy = 0.0;       // reference model on the clean test split
  double backdoored_model_accuracy = 0.0;  // attacked model on the same split
  std::vector<std::string> warnings;
};

// Attack success rate of `model` on the (already trigger-carrying) graph:
// fraction of victims predicted as target_class, counting only victims whose
// ground-truth label differs from the target. Throws ConfigError when no
// victim survives the filter. Fills the per-class breakdown when report is
// non-null.
double asr(const RelationalClassifier& model, const HeteroGraph& poisoned,
           const std::vector<NodeId>& victims, const std::vector<int>& gt_labels,
           int target_class, EvalReport* report = nullptr);

// Clean-accuracy difference: reference accuracy minus attacked-model accuracy
// on the identical clean split (signed; negative when the attacked model is
// better).
double cad(double clean_accuracy, double backdoored_accuracy);

// Mean over auxiliary types of the mean pairwise (1 - cosine) over each
// type's binary connection patterns. Zero patterns are excluded with a
// warning; types left with fewer than two patterns are skipped; no
// contributing type -> 0 with a warning.
double diversity_score(const std::vector<std::vector<std::vector<std::uint8_t>>>& patterns,
                       std::vector<std::string>* warnings = nullptr);

void save_eval_report_json(const std::string& path, const EvalReport& report);
EvalReport load_eval_report_json(const std::string& path);

// CSV serialization: one header plus one row per report.
std::string eval_csv_header();
std::string eval_csv_row(const EvalReport& report);

}  // namespace hgl
