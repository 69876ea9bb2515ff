#include "hgl/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "hgl/errors.hpp"
#include "hgl/tensor.hpp"

namespace hgl {

double asr(const RelationalClassifier& model, const HeteroGraph& poisoned,
           const std::vector<NodeId>& victims, const std::vector<int>& gt_labels,
           int target_class, EvalReport* report) {
  if (victims.empty()) throw ConfigError("asr: empty victim set");
  ForwardActivations acts = forward_activations(model, poisoned);
  int c = static_cast<int>(acts.logits.cols());
  if (target_class < 0 || target_class >= c)
    throw ConfigError("asr: target class out of range");
  int hits = 0, counted = 0, excluded = 0;
  std::vector<int> per_class_success(static_cast<std::size_t>(c), 0);
  std::vector<int> per_class_total(static_cast<std::size_t>(c), 0);
  for (NodeId v : victims) {
    int gt = gt_labels.at(static_cast<std::size_t>(v));
    if (gt == target_class) {
      ++excluded;
      continue;
    }
    ++counted;
    per_class_total[static_cast<std::size_t>(gt)] += 1;
    int pred = argmax_class(acts.logits.row_ptr(static_cast<std::size_t>(v)), c);
    if (pred == target_class) {
      ++hits;
      per_class_success[static_cast<std::size_t>(gt)] += 1;
    }
  }
  if (counted == 0)
    throw ConfigError("asr: every victim already carries the target class");
  double value = static_cast<double>(hits) / static_cast<double>(counted);
  if (report) {
    report->asr = value;
    report->n_victims = counted;
    report->n_excluded = excluded;
    report->per_class_success = per_class_success;
    report->per_class_total = per_class_total;
  }
  return value;
}

double cad(double clean_accuracy, double backdoored_accuracy) {
  return clean_accuracy - backdoored_accuracy;
}

double diversity_score(const std::vector<std::vector<std::vector<std::uint8_t>>>& patterns,
                       std::vector<std::string>* warnings) {
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
  };
  double type_sum = 0.0;
  int type_count = 0;
  for (std::size_t a = 0; a < patterns.size(); ++a) {
    std::vector<const std::vector<std::uint8_t>*> keep;
    for (const auto& p : patterns[a]) {
      bool nonzero = false;
      for (std::uint8_t b : p)
        if (b) {
          nonzero = true;
          break;
        }
      if (nonzero)
        keep.push_back(&p);
      else
        warn("diversity_score: zero pattern excluded for auxiliary type index " +
             std::to_string(a));
    }
    if (keep.size() < 2) {
      warn("diversity_score: fewer than two usable patterns for auxiliary type index " +
           std::to_string(a));
      continue;
    }
    double pair_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t j = i + 1; j < keep.size(); ++j) {
        const auto& p = *keep[i];
        const auto& q = *keep[j];
        if (p.size() != q.size())
          throw ShapeError("diversity_score: pattern width mismatch within one type");
        double dotv = 0.0, np = 0.0, nq = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
          dotv += static_cast<double>(p[k]) * static_cast<double>(q[k]);
          np += static_cast<double>(p[k]) * static_cast<double>(p[k]);
          nq += static_cast<double>(q[k]) * static_cast<double>(q[k]);
        }
        pair_sum += 1.0 - dotv / std::sqrt(np * nq);
        ++pairs;
      }
    type_sum += pair_sum / static_cast<double>(pairs);
    ++type_count;
  }
  if (type_count == 0) {
    warn("diversity_score: no auxiliary type contributed; score is 0");
    return 0.0;
  }
  return type_sum / static_cast<double>(type_count);
}

namespace {

using json = nlohmann::ordered_json;

}  // namespace

void save_eval_report_json(const std::string& path, const EvalReport& report) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "eval_report";
  j["asr"] = report.asr;
  j["cad"] = report.cad;
  j["diversity"] = report.diversity;
  j["n_victims"] = report.n_victims;
  j["n_excluded"] = report.n_excluded;
  j["excludes_target_class_victims"] = report.excludes_target_class_victims;
  j["per_class_success"] = report.per_class_success;
  j["per_class_total"] = report.per_class_total;
  j["clean_model_accuracy"] = report.clean_model_accuracy;
  j["backdoored_model_accuracy"] = report.backdoored_model_accuracy;
  j["warnings"] = report.warnings;
  std::ofstream f(path);
  if (!f) throw ConfigError("save_eval_report_json: cannot open '" + path + "'");
  f << j.dump(1) << '\n';
}

EvalReport load_eval_report_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("load_eval_report_json: cannot open '" + path + "'");
  json j = json::parse(f);
  EvalReport r;
  r.asr = j.at("asr").get<double>();
  r.cad = j.at("cad").get<double>();
  r.diversity = j.at("diversity").get<double>();
  r.n_victims = j.at("n_victims").get<int>();
  r.n_excluded = j.at("n_excluded").get<int>();
  r.excludes_target_class_victims = j.at("excludes_target_class_victims").get<bool>();
  r.per_class_success = j.at("per_class_success").get<std::vector<int>>();
  r.per_class_total = j.at("per_class_total").get<std::vector<int>>();
  r.clean_model_accuracy = j.at("clean_model_accuracy").get<double>();
  r.backdoored_model_accuracy = j.at("backdoored_model_accuracy").get<double>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

std::string eval_csv_header() {
  return "asr,cad,diversity,n_victims,n_excluded,clean_accuracy,backdoored_accuracy";
}

std::string eval_csv_row(const EvalReport& report) {
  std::ostringstream os;
  os << std::setprecision(10) << report.asr << ',' << report.cad << ',' << report.diversity
     << ',' << report.n_victims << ',' << report.n_excluded << ','
     << report.clean_model_accuracy << ',' << report.backdoored_model_accuracy;
  return os.str();
}

}  // namespace hgl
