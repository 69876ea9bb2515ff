#include "hgl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hgl/errors.hpp"

namespace hgl {

namespace fs = std::filesystem;

namespace {

using json = nlohmann::ordered_json;

json tensor_to_json(const Tensor& t) {
  json j;
  j["rows"] = t.rows();
  j["cols"] = t.cols();
  j["data"] = t.data;
  return j;
}

Tensor tensor_from_json(const json& j) {
  Tensor t(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != t.numel())
    throw ConfigError("tensor_from_json: data length does not match the shape");
  t.data = std::move(data);
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << content;
}

template <class T>
T val_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  return it == j.end() ? fallback : it->get<T>();
}

json optimizer_to_json(const OptimizerConfig& o) {
  json j;
  j["lr"] = o.lr;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["eps"] = o.eps;
  j["weight_decay"] = o.weight_decay;
  j["clip_norm"] = o.clip_norm;
  return j;
}

OptimizerConfig optimizer_from_json(const json& j, OptimizerConfig o) {
  o.lr = val_or(j, "lr", o.lr);
  o.beta1 = val_or(j, "beta1", o.beta1);
  o.beta2 = val_or(j, "beta2", o.beta2);
  o.eps = val_or(j, "eps", o.eps);
  o.weight_decay = val_or(j, "weight_decay", o.weight_decay);
  o.clip_norm = val_or(j, "clip_norm", o.clip_norm);
  return o;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "experiment_config";
  json ds;
  ds["types"] = json::array();
  for (const auto& t : c.dataset.types)
    ds["types"].push_back(
        {{"name", t.name}, {"count", t.count}, {"dim", t.dim}, {"mean_scale", t.mean_scale}});
  ds["relations"] = json::array();
  for (const auto& r : c.dataset.relations)
    ds["relations"].push_back({{"src", r.src},
                               {"dst", r.dst},
                               {"mean_degree", r.mean_degree},
                               {"pareto_alpha", r.pareto_alpha}});
  ds["primary"] = c.dataset.primary;
  ds["trigger"] = c.dataset.trigger;
  ds["num_classes"] = c.dataset.num_classes;
  ds["class_signal"] = c.dataset.class_signal;
  ds["primary_class_scale"] = c.dataset.primary_class_scale;
  ds["feature_noise"] = c.dataset.feature_noise;
  ds["homophily"] = c.dataset.homophily;
  ds["target_class"] = c.dataset.target_class;
  j["dataset"] = std::move(ds);
  j["graph_path"] = c.graph_path;
  j["splits"] = {{"train", c.splits.train},
                 {"test", c.splits.test},
                 {"val", c.splits.val},
                 {"poison", c.splits.poison}};
  j["classifier"] = {{"hidden", c.classifier.hidden}, {"layers", c.classifier.layers}};
  j["train"] = {{"epochs", c.train.epochs}, {"optimizer", optimizer_to_json(c.train.optimizer)}};
  j["generator"] = {{"noise_dim", c.generator.noise_dim},
                    {"heads", c.generator.heads},
                    {"head_dim", c.generator.head_dim},
                    {"hidden", c.generator.hidden},
                    {"p_mask", c.generator.p_mask},
                    {"gumbel_temp", c.generator.gumbel_temp},
                    {"tau", c.generator.tau},
                    {"triggers_per_victim", c.generator.triggers_per_victim},
                    {"use_adain", c.generator.use_adain},
                    {"adain_eps", c.generator.adain_eps}};
  j["bilevel"] = {{"iterations", c.bilevel.iterations},
                  {"inner_steps", c.bilevel.inner_steps},
                  {"victim_batch", c.bilevel.victim_batch},
                  {"lambda_div", c.bilevel.lambda_div},
                  {"surrogate_opt", optimizer_to_json(c.bilevel.surrogate_opt)},
                  {"generator_opt", optimizer_to_json(c.bilevel.generator_opt)}};
  j["refine"] = {{"steps", c.refine.steps},
                 {"lambda_attack", c.refine.lambda_attack},
                 {"bandwidth_scales", c.refine.bandwidth_scales},
                 {"mmd_reference", c.refine.mmd_reference},
                 {"optimizer", optimizer_to_json(c.refine.optimizer)}};
  j["defense"] = {{"tau_r", c.defense.tau_r},       {"pca_dim", c.defense.pca_dim},
                  {"knn_k", c.defense.knn_k},       {"prune_fraction", c.defense.prune_fraction},
                  {"od_fraction", c.defense.od_fraction}, {"od_hidden", c.defense.od_hidden},
                  {"od_epochs", c.defense.od_epochs}};
  j["pool_fold"] = c.pool_fold;
  j["attack"] = c.attack;
  j["use_refinement"] = c.use_refinement;
  j["defense_csd"] = c.defense_csd;
  j["defense_prune"] = c.defense_prune;
  j["defense_od"] = c.defense_od;
  j["trial_seeds"] = c.trial_seeds;
  j["out_dir"] = c.out_dir;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  if (auto it = j.find("dataset"); it != j.end()) {
    const json& ds = *it;
    if (ds.contains("types")) {
      c.dataset.types.clear();
      for (const auto& t : ds.at("types"))
        c.dataset.types.push_back({t.at("name").get<std::string>(), t.at("count").get<int>(),
                                   t.at("dim").get<int>(),
                                   val_or(t, "mean_scale", 0.0)});
    }
    if (ds.contains("relations")) {
      c.dataset.relations.clear();
      for (const auto& r : ds.at("relations"))
        c.dataset.relations.push_back(
            {r.at("src").get<std::string>(), r.at("dst").get<std::string>(),
             val_or(r, "mean_degree", 2.0), val_or(r, "pareto_alpha", 2.5)});
    }
    c.dataset.primary = val_or(ds, "primary", c.dataset.primary);
    c.dataset.trigger = val_or(ds, "trigger", c.dataset.trigger);
    c.dataset.num_classes = val_or(ds, "num_classes", c.dataset.num_classes);
    c.dataset.class_signal = val_or(ds, "class_signal", c.dataset.class_signal);
    c.dataset.primary_class_scale =
        val_or(ds, "primary_class_scale", c.dataset.primary_class_scale);
    c.dataset.feature_noise = val_or(ds, "feature_noise", c.dataset.feature_noise);
    c.dataset.homophily = val_or(ds, "homophily", c.dataset.homophily);
    c.dataset.target_class = val_or(ds, "target_class", c.dataset.target_class);
  }
  c.graph_path = val_or(j, "graph_path", c.graph_path);
  if (auto it = j.find("splits"); it != j.end()) {
    c.splits.train = val_or(*it, "train", c.splits.train);
    c.splits.test = val_or(*it, "test", c.splits.test);
    c.splits.val = val_or(*it, "val", c.splits.val);
    c.splits.poison = val_or(*it, "poison", c.splits.poison);
  }
  if (auto it = j.find("classifier"); it != j.end()) {
    c.classifier.hidden = val_or(*it, "hidden", c.classifier.hidden);
    c.classifier.layers = val_or(*it, "layers", c.classifier.layers);
  }
  if (auto it = j.find("train"); it != j.end()) {
    c.train.epochs = val_or(*it, "epochs", c.train.epochs);
    if (it->contains("optimizer"))
      c.train.optimizer = optimizer_from_json(it->at("optimizer"), c.train.optimizer);
  }
  if (auto it = j.find("generator"); it != j.end()) {
    const json& gj = *it;
    c.generator.noise_dim = val_or(gj, "noise_dim", c.generator.noise_dim);
    c.generator.heads = val_or(gj, "heads", c.generator.heads);
    c.generator.head_dim = val_or(gj, "head_dim", c.generator.head_dim);
    c.generator.hidden = val_or(gj, "hidden", c.generator.hidden);
    c.generator.p_mask = val_or(gj, "p_mask", c.generator.p_mask);
    c.generator.gumbel_temp = val_or(gj, "gumbel_temp", c.generator.gumbel_temp);
    c.generator.tau = val_or(gj, "tau", c.generator.tau);
    c.generator.triggers_per_victim =
        val_or(gj, "triggers_per_victim", c.generator.triggers_per_victim);
    c.generator.use_adain = val_or(gj, "use_adain", c.generator.use_adain);
    c.generator.adain_eps = val_or(gj, "adain_eps", c.generator.adain_eps);
  }
  if (auto it = j.find("bilevel"); it != j.end()) {
    const json& bj = *it;
    c.bilevel.iterations = val_or(bj, "iterations", c.bilevel.iterations);
    c.bilevel.inner_steps = val_or(bj, "inner_steps", c.bilevel.inner_steps);
    c.bilevel.victim_batch = val_or(bj, "victim_batch", c.bilevel.victim_batch);
    c.bilevel.lambda_div = val_or(bj, "lambda_div", c.bilevel.lambda_div);
    if (bj.contains("surrogate_opt"))
      c.bilevel.surrogate_opt = optimizer_from_json(bj.at("surrogate_opt"), c.bilevel.surrogate_opt);
    if (bj.contains("generator_opt"))
      c.bilevel.generator_opt = optimizer_from_json(bj.at("generator_opt"), c.bilevel.generator_opt);
  }
  if (auto it = j.find("refine"); it != j.end()) {
    const json& rj = *it;
    c.refine.steps = val_or(rj, "steps", c.refine.steps);
    c.refine.lambda_attack = val_or(rj, "lambda_attack", c.refine.lambda_attack);
    c.refine.bandwidth_scales =
        val_or(rj, "bandwidth_scales", c.refine.bandwidth_scales);
    c.refine.mmd_reference = val_or(rj, "mmd_reference", c.refine.mmd_reference);
    if (rj.contains("optimizer"))
      c.refine.optimizer = optimizer_from_json(rj.at("optimizer"), c.refine.optimizer);
  }
  if (auto it = j.find("defense"); it != j.end()) {
    const json& dj = *it;
    c.defense.tau_r = val_or(dj, "tau_r", c.defense.tau_r);
    c.defense.pca_dim = val_or(dj, "pca_dim", c.defense.pca_dim);
    c.defense.knn_k = val_or(dj, "knn_k", c.defense.knn_k);
    c.defense.prune_fraction = val_or(dj, "prune_fraction", c.defense.prune_fraction);
    c.defense.od_fraction = val_or(dj, "od_fraction", c.defense.od_fraction);
    c.defense.od_hidden = val_or(dj, "od_hidden", c.defense.od_hidden);
    c.defense.od_epochs = val_or(dj, "od_epochs", c.defense.od_epochs);
  }
  c.pool_fold = val_or(j, "pool_fold", c.pool_fold);
  c.attack = val_or(j, "attack", c.attack);
  c.use_refinement = val_or(j, "use_refinement", c.use_refinement);
  c.defense_csd = val_or(j, "defense_csd", c.defense_csd);
  c.defense_prune = val_or(j, "defense_prune", c.defense_prune);
  c.defense_od = val_or(j, "defense_od", c.defense_od);
  c.trial_seeds = val_or(j, "trial_seeds", c.trial_seeds);
  c.out_dir = val_or(j, "out_dir", c.out_dir);
  return c;
}

std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

void validate(const ExperimentConfig& cfg) {
  std::vector<std::string> bad;
  if (cfg.attack != "generative" && cfg.attack != "naive")
    bad.push_back("attack must be \"generative\" or \"naive\"");
  if (cfg.pool_fold < 1) bad.push_back("pool_fold must be positive");
  if (cfg.trial_seeds.empty()) bad.push_back("trial_seeds must be non-empty");
  if (std::set<std::uint64_t>(cfg.trial_seeds.begin(), cfg.trial_seeds.end()).size() !=
      cfg.trial_seeds.size())
    bad.push_back("trial_seeds must be distinct");
  if (cfg.out_dir.empty()) bad.push_back("out_dir must be set");
  double sum = cfg.splits.train + cfg.splits.test + cfg.splits.val;
  if (std::abs(sum - 1.0) > 1e-9) bad.push_back("split fractions must sum to 1");
  if (cfg.splits.poison < 0.0 || cfg.splits.poison > cfg.splits.train ||
      cfg.splits.poison > cfg.splits.test)
    bad.push_back("poison fraction must not exceed the train or test fraction");
  if (!bad.empty()) {
    std::string msg = "ExperimentConfig invalid:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
  if (cfg.graph_path.empty()) validate(cfg.dataset);
  validate(cfg.defense);
}

std::string experiment_json_string(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(1) + "\n";
}

ExperimentConfig load_experiment_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("load_experiment_json: cannot open '" + path + "'");
  try {
    return config_from_json(json::parse(f));
  } catch (const json::exception& e) {
    throw ConfigError("load_experiment_json: '" + path + "': " + e.what());
  }
}

void save_experiment_json(const std::string& path, const ExperimentConfig& cfg) {
  write_file(path, experiment_json_string(cfg));
}

namespace {

void save_splits_json(const std::string& path, const AttackTargets& t) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "splits";
  j["train"] = t.train;
  j["test"] = t.test;
  j["val"] = t.val;
  j["poison_train"] = t.poison_train;
  j["poison_test"] = t.poison_test;
  write_file(path, j.dump(1) + "\n");
}

AttackTargets load_splits_json(const std::string& path) {
  json j = json::parse(read_file(path));
  AttackTargets t;
  t.train = j.at("train").get<std::vector<NodeId>>();
  t.test = j.at("test").get<std::vector<NodeId>>();
  t.val = j.at("val").get<std::vector<NodeId>>();
  t.poison_train = j.at("poison_train").get<std::vector<NodeId>>();
  t.poison_test = j.at("poison_test").get<std::vector<NodeId>>();
  return t;
}

using Patterns = std::vector<std::vector<std::vector<std::uint8_t>>>;

void save_delta_json(const std::string& path, const GraphDelta& d, const Patterns& patterns) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "graph_delta";
  j["features"] = tensor_to_json(d.new_features);
  j["victim_of"] = d.victim_of;
  j["edges"] = json::array();
  for (const auto& [r, s, t] : d.new_edges) j["edges"].push_back({r, s, t});
  j["patterns"] = json::array();
  for (const auto& per_type : patterns) {
    json pt = json::array();
    for (const auto& p : per_type) pt.push_back(std::vector<int>(p.begin(), p.end()));
    j["patterns"].push_back(std::move(pt));
  }
  write_file(path, j.dump(1) + "\n");
}

std::pair<GraphDelta, Patterns> load_delta_json(const std::string& path) {
  json j = json::parse(read_file(path));
  GraphDelta d;
  d.new_features = tensor_from_json(j.at("features"));
  d.victim_of = j.at("victim_of").get<std::vector<NodeId>>();
  for (const auto& e : j.at("edges"))
    d.new_edges.emplace_back(e.at(0).get<int>(), e.at(1).get<NodeId>(), e.at(2).get<NodeId>());
  Patterns patterns;
  for (const auto& pt : j.at("patterns")) {
    std::vector<std::vector<std::uint8_t>> per_type;
    for (const auto& p : pt) {
      auto ints = p.get<std::vector<int>>();
      per_type.emplace_back(ints.begin(), ints.end());
    }
    patterns.push_back(std::move(per_type));
  }
  return {std::move(d), std::move(patterns)};
}

void save_refine_json(const std::string& path, const AffineRefinement& a) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "affine_refinement";
  j["w"] = tensor_to_json(a.w);
  j["b"] = tensor_to_json(a.b);
  write_file(path, j.dump(1) + "\n");
}

AffineRefinement load_refine_json(const std::string& path) {
  json j = json::parse(read_file(path));
  return {tensor_from_json(j.at("w")), tensor_from_json(j.at("b"))};
}

void save_defense_eval_json(const std::string& path, const DefenseEval& d) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "defense_eval";
  j["name"] = d.name;
  j["post_asr"] = d.post_asr;
  j["post_accuracy"] = d.post_accuracy;
  j["trigger_type_ratio"] = d.trigger_type_ratio;
  j["injected_pruned_fraction"] = d.injected_pruned_fraction;
  j["rectified"] = d.rectified;
  j["pruned_edges"] = d.pruned_edges;
  write_file(path, j.dump(1) + "\n");
}

DefenseEval load_defense_eval_json(const std::string& path) {
  json j = json::parse(read_file(path));
  DefenseEval d;
  d.name = j.at("name").get<std::string>();
  d.post_asr = j.at("post_asr").get<double>();
  d.post_accuracy = j.at("post_accuracy").get<double>();
  d.trigger_type_ratio = j.at("trigger_type_ratio").get<double>();
  d.injected_pruned_fraction = j.at("injected_pruned_fraction").get<double>();
  d.rectified = j.at("rectified").get<int>();
  d.pruned_edges = j.at("pruned_edges").get<int>();
  return d;
}

void save_train_trace_csv(const std::string& path, const std::vector<EpochStats>& trace) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_acc\n";
  for (const auto& e : trace)
    os << e.epoch << ',' << csv_num(e.train_loss) << ',' << csv_num(e.train_acc) << ','
       << csv_num(e.val_acc) << '\n';
  write_file(path, os.str());
}

// Full-type-width connection patterns recovered from a delta's edges; victim
// links are excluded so patterns describe candidate attachments only.
Patterns patterns_from_delta(const HeteroGraph& base, const SchemaRoles& roles,
                             const GraphDelta& delta) {
  int base_id = base.num_nodes(roles.trigger);
  Patterns out(roles.auxiliary.size());
  for (std::size_t a = 0; a < roles.auxiliary.size(); ++a)
    out[a].assign(static_cast<std::size_t>(delta.count()),
                  std::vector<std::uint8_t>(
                      static_cast<std::size_t>(base.num_nodes(roles.auxiliary[a])), 0));
  for (const auto& [r, s, d] : delta.new_edges) {
    const Relation& rel = base.relation(r);
    int trig = -1;
    NodeId other = -1;
    TypeId other_type = -1;
    if (rel.src == roles.trigger && s >= base_id) {
      trig = s - base_id;
      other = d;
      other_type = rel.dst;
    } else if (rel.dst == roles.trigger && d >= base_id) {
      trig = d - base_id;
      other = s;
      other_type = rel.src;
    } else {
      continue;
    }
    if (other_type == roles.primary &&
        other == delta.victim_of[static_cast<std::size_t>(trig)])
      continue;  // the victim link is not a candidate attachment
    for (std::size_t a = 0; a < roles.auxiliary.size(); ++a)
      if (roles.auxiliary[a] == other_type)
        out[a][static_cast<std::size_t>(trig)][static_cast<std::size_t>(other)] = 1;
  }
  return out;
}

}  // namespace

struct TrialRunner::Impl {
  ExperimentConfig cfg;
  std::uint64_t seed;
  bool resume;
  std::string dir;
  Rng root;
  Warnings warnings;

  std::optional<LoadedGraph> lg;
  std::optional<AttackTargets> targets;
  std::optional<RelationalClassifier> clean;
  std::optional<CandidatePool> pool;
  std::optional<RelationalClassifier> surrogate;
  std::optional<TriggerGenerator> gen;
  std::optional<AdaINStats> stats;
  std::optional<AffineRefinement> affine;
  std::optional<GraphDelta> train_delta;
  Patterns train_patterns;
  std::optional<HeteroGraph> train_poisoned;
  std::vector<int> poisoned_labels;
  std::optional<RelationalClassifier> backdoored;
  std::optional<GraphDelta> test_delta;
  Patterns test_patterns;
  std::optional<HeteroGraph> eval_graph;
  std::optional<EvalReport> eval;
  std::vector<DefenseEval> defenses;
  bool defended = false;

  Impl(ExperimentConfig c, std::uint64_t s, bool r)
      : cfg(std::move(c)), seed(s), resume(r), root(s) {
    validate(cfg);
    dir = cfg.out_dir + "/trial_" + std::to_string(seed);
    fs::create_directories(dir);
    ensure_config_snapshot();
  }

  std::string path(const std::string& name) const { return dir + "/" + name; }
  bool generative() const { return cfg.attack == "generative"; }

  void ensure_config_snapshot() {
    json j;
    j["seed"] = seed;
    j["config"] = config_to_json(cfg);
    std::string snap = j.dump(1) + "\n";
    std::string p = path("config.json");
    if (fs::exists(p)) {
      if (read_file(p) == snap) return;
      if (resume)
        throw ConfigError("trial directory '" + dir +
                          "' was produced by a different config; refusing to resume");
    }
    write_file(p, snap);
  }

  const HeteroGraph& graph() { return lg->graph; }
  const SchemaRoles& roles() { return lg->roles; }

  void ensure_graph() {
    if (lg) return;
    std::string p = path("graph.json");
    if (resume && fs::exists(p)) {
      lg = load_graph_json(p);
      return;
    }
    if (!cfg.graph_path.empty())
      lg = load_graph_json(cfg.graph_path);
    else
      lg = generate_synthetic(cfg.dataset, root.substream("data").seed());
    save_graph_json(p, lg->graph, lg->roles);
  }

  void ensure_splits() {
    ensure_graph();
    if (targets) return;
    std::string p = path("splits.json");
    if (resume && fs::exists(p)) {
      targets = load_splits_json(p);
      return;
    }
    Rng r = root.substream("splits");
    targets = split_targets(graph().num_nodes(roles().primary), roles().labels,
                            roles().target_class, cfg.splits, r);
    save_splits_json(p, *targets);
  }

  void ensure_clean() {
    ensure_splits();
    if (clean) return;
    std::string p = path("clean_model.json");
    if (resume && fs::exists(p)) {
      clean = load_classifier_json(p);
      return;
    }
    Rng ir = root.substream("init.clean");
    RelationalClassifier m0 = RelationalClassifier::init(graph(), roles(), cfg.classifier, ir);
    TrainResult tr =
        train_clean(m0, graph(), roles().labels, targets->train, targets->val, cfg.train);
    clean = std::move(tr.model);
    save_classifier_json(p, *clean);
    save_train_trace_csv(path("clean_train.csv"), tr.trace);
  }

  void ensure_pool() {
    ensure_clean();
    if (pool) return;
    std::string p = path("pool.json");
    if (resume && fs::exists(p)) {
      pool = load_pool_json(p, graph());
      return;
    }
    pool = build_pool(*clean, graph(), roles(), cfg.pool_fold);
    save_pool_json(p, graph(), *pool);
  }

  void ensure_attack() {
    if (!generative()) return;
    ensure_pool();
    if (gen) return;
    stats = AdaINStats::from_features(graph().features(roles().trigger), cfg.generator.adain_eps);
    std::string gp = path("generator.json");
    std::string sp = path("surrogate.json");
    if (resume && fs::exists(gp) && fs::exists(sp)) {
      LoadedGenerator lgen = load_generator_json(gp);
      gen = std::move(lgen.gen);
      stats = std::move(lgen.stats);
      surrogate = load_classifier_json(sp);
      return;
    }
    Rng gi = root.substream("init.generator");
    TriggerGenerator g0 = TriggerGenerator::init(graph(), roles(), cfg.generator, gi);
    BilevelConfig bc = cfg.bilevel;
    bc.log_path = path("bilevel_trace.csv");
    Rng br = root.substream("bilevel");
    BilevelResult res = run_bilevel(*clean, g0, graph(), roles(), *pool, *targets, *stats, bc, br);
    surrogate = std::move(res.surrogate);
    gen = std::move(res.generator);
    warnings.insert(warnings.end(), res.warnings.begin(), res.warnings.end());
    save_generator_json(gp, *gen, *stats);
    save_classifier_json(sp, *surrogate);
  }

  void ensure_refine() {
    if (!generative()) return;
    ensure_attack();
    if (!cfg.use_refinement || affine) return;
    std::string p = path("refine.json");
    if (resume && fs::exists(p)) {
      affine = load_refine_json(p);
      return;
    }
    RefineConfig rc = cfg.refine;
    rc.log_path = path("refine_trace.csv");
    Rng rr = root.substream("refine");
    RefineResult res = run_refinement(*surrogate, *gen, graph(), roles(), *pool,
                                      targets->poison_train, *stats, rc, rr);
    affine = std::move(res.affine);
    warnings.insert(warnings.end(), res.warnings.begin(), res.warnings.end());
    save_refine_json(p, *affine);
  }

  std::pair<GraphDelta, Patterns> make_delta(const HeteroGraph& base,
                                             const std::vector<NodeId>& victims,
                                             const std::string& stream) {
    if (generative()) {
      Rng n = root.substream("delta." + stream + ".noise");
      Rng gu = root.substream("delta." + stream + ".gumbel");
      Rng mk = root.substream("delta." + stream + ".mask");
      const Tensor* w = affine ? &affine->w : nullptr;
      const Tensor* b = affine ? &affine->b : nullptr;
      GenerationResult gr = generate_delta(*gen, base, roles(), *pool, victims, *stats, w, b, n,
                                           gu, mk, SelectMode::kInfer, &warnings);
      return {std::move(gr.delta), std::move(gr.patterns)};
    }
    Rng nr = root.substream("naive." + stream);
    GraphDelta d = naive_inject(base, roles(), victims, nr);
    Patterns pat = patterns_from_delta(base, roles(), d);
    return {std::move(d), std::move(pat)};
  }

  void ensure_poison() {
    ensure_refine();
    ensure_splits();
    if (backdoored && eval_graph) return;

    std::string tdp = path("train_delta.json");
    if (resume && fs::exists(tdp)) {
      auto [d, pat] = load_delta_json(tdp);
      train_delta = std::move(d);
      train_patterns = std::move(pat);
    } else {
      auto [d, pat] = make_delta(graph(), targets->poison_train, "train");
      train_delta = std::move(d);
      train_patterns = std::move(pat);
      save_delta_json(tdp, *train_delta, train_patterns);
    }
    train_poisoned = apply_delta(graph(), roles(), *train_delta);
    poisoned_labels = roles().labels;
    for (NodeId v : targets->poison_train)
      poisoned_labels[static_cast<std::size_t>(v)] = roles().target_class;

    std::string bp = path("backdoored_model.json");
    if (resume && fs::exists(bp)) {
      backdoored = load_classifier_json(bp);
    } else {
      Rng ir = root.substream("init.backdoor");
      RelationalClassifier m0 =
          RelationalClassifier::init(*train_poisoned, roles(), cfg.classifier, ir);
      TrainResult tr = train_clean(m0, *train_poisoned, poisoned_labels, targets->train,
                                   targets->val, cfg.train);
      backdoored = std::move(tr.model);
      save_classifier_json(bp, *backdoored);
      save_train_trace_csv(path("backdoor_train.csv"), tr.trace);
    }

    std::string xdp = path("test_delta.json");
    if (resume && fs::exists(xdp)) {
      auto [d, pat] = load_delta_json(xdp);
      test_delta = std::move(d);
      test_patterns = std::move(pat);
    } else {
      auto [d, pat] = make_delta(*train_poisoned, targets->poison_test, "test");
      test_delta = std::move(d);
      test_patterns = std::move(pat);
      save_delta_json(xdp, *test_delta, test_patterns);
    }
    eval_graph = apply_delta(*train_poisoned, roles(), *test_delta);
  }

  void ensure_evaluate() {
    ensure_poison();
    ensure_clean();
    if (eval) return;
    std::string p = path("eval.json");
    if (resume && fs::exists(p)) {
      eval = load_eval_report_json(p);
      return;
    }
    EvalReport er;
    er.clean_model_accuracy = accuracy(*clean, graph(), targets->test, roles().labels);
    er.backdoored_model_accuracy = accuracy(*backdoored, graph(), targets->test, roles().labels);
    er.cad = cad(er.clean_model_accuracy, er.backdoored_model_accuracy);
    asr(*backdoored, *eval_graph, targets->poison_test, roles().labels, roles().target_class,
        &er);
    er.diversity = diversity_score(test_patterns, &er.warnings);
    eval = std::move(er);
    save_eval_report_json(p, *eval);
  }

  double injected_isolated_fraction(const HeteroGraph& purified, int base_id, int count) {
    if (count == 0) return 0.0;
    int isolated = 0;
    for (int i = 0; i < count; ++i) {
      NodeId v = base_id + i;
      bool has_edge = false;
      for (int r = 0; r < purified.num_relations() && !has_edge; ++r) {
        const Relation& rel = purified.relation(r);
        if (rel.src == roles().trigger && !purified.out_neighbors(r, v).empty()) has_edge = true;
        if (rel.dst == roles().trigger && !purified.in_neighbors(r, v).empty()) has_edge = true;
      }
      if (!has_edge) ++isolated;
    }
    return static_cast<double>(isolated) / static_cast<double>(count);
  }

  DefenseEval run_one_defense(const std::string& name) {
    DefenseEval de;
    de.name = name;
    int base_id = graph().num_nodes(roles().trigger);
    int injected = train_delta->count();
    HeteroGraph purified = *train_poisoned;
    std::vector<int> train_labels = poisoned_labels;
    if (name == "csd") {
      DefenseConfig dc = cfg.defense;
      dc.seed = root.substream("defense.csd").seed();
      DefenseOutcome oc = csd_defend(*train_poisoned, poisoned_labels, roles(), dc);
      purified = std::move(oc.graph);
      train_labels = std::move(oc.labels);
      const TypeDefenseReport& tr =
          oc.report.per_type.at(static_cast<std::size_t>(roles().trigger));
      de.trigger_type_ratio = tr.ratio;
      de.pruned_edges = oc.report.total_pruned_edges;
      de.rectified = static_cast<int>(oc.report.rectified.size());
      int hits = 0;
      for (NodeId s : tr.suspicious)
        if (s >= base_id && s < base_id + injected) ++hits;
      de.injected_pruned_fraction =
          injected > 0 ? static_cast<double>(hits) / static_cast<double>(injected) : 0.0;
      save_defense_report_json(path("defense_csd_report.json"), oc.report);
    } else if (name == "prune") {
      std::uint64_t ps = root.substream("defense.prune").seed();
      PruneOutcome oc = prune_defense(*train_poisoned, cfg.defense.prune_fraction, ps);
      purified = std::move(oc.graph);
      de.pruned_edges = static_cast<int>(oc.report.removed.size());
      de.injected_pruned_fraction = injected_isolated_fraction(purified, base_id, injected);
    } else if (name == "od") {
      DefenseConfig dc = cfg.defense;
      dc.seed = root.substream("defense.od").seed();
      OdOutcome oc = od_defense(*train_poisoned, dc);
      de.pruned_edges =
          static_cast<int>(train_poisoned->num_edges() - oc.graph.num_edges());
      purified = std::move(oc.graph);
      int hits = 0;
      for (const auto& tr : oc.per_type)
        if (tr.type == graph().type_name(roles().trigger))
          for (NodeId v : tr.dropped)
            if (v >= base_id && v < base_id + injected) ++hits;
      de.injected_pruned_fraction =
          injected > 0 ? static_cast<double>(hits) / static_cast<double>(injected) : 0.0;
    } else {
      throw ConfigError("unknown defense '" + name + "'");
    }
    Rng ir = root.substream("init.defense." + name);
    RelationalClassifier m0 = RelationalClassifier::init(purified, roles(), cfg.classifier, ir);
    TrainResult tr =
        train_clean(m0, purified, train_labels, targets->train, targets->val, cfg.train);
    HeteroGraph post_graph = apply_delta(purified, roles(), *test_delta);
    de.post_asr = asr(tr.model, post_graph, targets->poison_test, roles().labels,
                      roles().target_class);
    de.post_accuracy = accuracy(tr.model, graph(), targets->test, roles().labels);
    save_classifier_json(path("defense_" + name + "_model.json"), tr.model);
    return de;
  }

  void ensure_defend() {
    if (defended) return;
    ensure_poison();
    std::vector<std::string> names;
    if (cfg.defense_csd) names.push_back("csd");
    if (cfg.defense_prune) names.push_back("prune");
    if (cfg.defense_od) names.push_back("od");
    for (const auto& name : names) {
      std::string ep = path("defense_" + name + ".json");
      if (resume && fs::exists(ep)) {
        defenses.push_back(load_defense_eval_json(ep));
        continue;
      }
      DefenseEval de = run_one_defense(name);
      save_defense_eval_json(ep, de);
      defenses.push_back(std::move(de));
    }
    defended = true;
  }
};

TrialRunner::TrialRunner(ExperimentConfig cfg, std::uint64_t seed, bool resume)
    : impl_(std::make_unique<Impl>(std::move(cfg), seed, resume)) {}
TrialRunner::~TrialRunner() = default;

void TrialRunner::stage_graph() { impl_->ensure_graph(); }
void TrialRunner::stage_splits() { impl_->ensure_splits(); }
void TrialRunner::stage_train_clean() { impl_->ensure_clean(); }
void TrialRunner::stage_pool() { impl_->ensure_pool(); }
void TrialRunner::stage_attack() { impl_->ensure_attack(); }
void TrialRunner::stage_refine() { impl_->ensure_refine(); }
void TrialRunner::stage_poison() { impl_->ensure_poison(); }
void TrialRunner::stage_evaluate() { impl_->ensure_evaluate(); }
void TrialRunner::stage_defend() { impl_->ensure_defend(); }
const std::string& TrialRunner::dir() const { return impl_->dir; }

TrialResult TrialRunner::run_all() {
  auto t0 = std::chrono::steady_clock::now();
  impl_->ensure_evaluate();
  if (impl_->cfg.defense_csd || impl_->cfg.defense_prune || impl_->cfg.defense_od)
    impl_->ensure_defend();
  TrialResult r;
  r.seed = impl_->seed;
  r.eval = *impl_->eval;
  r.defenses = impl_->defenses;
  r.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

AggregateStat make_stat(const std::vector<double>& xs) {
  AggregateStat s;
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  s.high_variance = s.stddev > 0.1;
  return s;
}

json stat_to_json(const AggregateStat& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"high_variance", s.high_variance}};
}

PipelineResult aggregate_and_write(const ExperimentConfig& cfg,
                                   std::vector<TrialResult> trials) {
  PipelineResult res;
  res.trials = std::move(trials);
  std::vector<double> asr_v, cad_v, div_v;
  for (const auto& t : res.trials) {
    asr_v.push_back(t.eval.asr);
    cad_v.push_back(t.eval.cad);
    div_v.push_back(t.eval.diversity);
  }
  res.asr = make_stat(asr_v);
  res.cad = make_stat(cad_v);
  res.diversity = make_stat(div_v);
  std::vector<std::string> names;
  if (cfg.defense_csd) names.push_back("csd");
  if (cfg.defense_prune) names.push_back("prune");
  if (cfg.defense_od) names.push_back("od");
  for (const auto& name : names) {
    std::vector<double> post;
    for (const auto& t : res.trials)
      for (const auto& d : t.defenses)
        if (d.name == name) post.push_back(d.post_asr);
    res.defense_post_asr.emplace_back(name, make_stat(post));
  }

  json j;
  j["format_version"] = 1;
  j["kind"] = "experiment_report";
  j["attack"] = cfg.attack;
  j["n_trials"] = res.trials.size();
  j["trials"] = json::array();
  for (const auto& t : res.trials) {
    json tj;
    tj["seed"] = t.seed;
    tj["asr"] = t.eval.asr;
    tj["cad"] = t.eval.cad;
    tj["diversity"] = t.eval.diversity;
    tj["n_victims"] = t.eval.n_victims;
    tj["n_excluded"] = t.eval.n_excluded;
    tj["clean_model_accuracy"] = t.eval.clean_model_accuracy;
    tj["backdoored_model_accuracy"] = t.eval.backdoored_model_accuracy;
    if (!names.empty()) {
      tj["defenses"] = json::array();
      for (const auto& d : t.defenses)
        tj["defenses"].push_back({{"name", d.name},
                                  {"post_asr", d.post_asr},
                                  {"post_accuracy", d.post_accuracy},
                                  {"trigger_type_ratio", d.trigger_type_ratio},
                                  {"injected_pruned_fraction", d.injected_pruned_fraction},
                                  {"rectified", d.rectified},
                                  {"pruned_edges", d.pruned_edges}});
    }
    j["trials"].push_back(std::move(tj));
  }
  json agg;
  agg["asr"] = stat_to_json(res.asr);
  agg["cad"] = stat_to_json(res.cad);
  agg["diversity"] = stat_to_json(res.diversity);
  if (!names.empty()) {
    json dj;
    for (const auto& [name, stat] : res.defense_post_asr) dj[name] = stat_to_json(stat);
    agg["defense_post_asr"] = std::move(dj);
  }
  j["aggregate"] = std::move(agg);
  write_file(cfg.out_dir + "/report.json", j.dump(1) + "\n");

  std::ostringstream csv;
  csv << "seed,asr,cad,diversity";
  for (const auto& name : names) csv << ',' << name << "_post_asr";
  csv << '\n';
  for (const auto& t : res.trials) {
    csv << t.seed << ',' << csv_num(t.eval.asr) << ',' << csv_num(t.eval.cad) << ','
        << csv_num(t.eval.diversity);
    for (const auto& name : names)
      for (const auto& d : t.defenses)
        if (d.name == name) csv << ',' << csv_num(d.post_asr);
    csv << '\n';
  }
  csv << "mean," << csv_num(res.asr.mean) << ',' << csv_num(res.cad.mean) << ','
      << csv_num(res.diversity.mean);
  for (const auto& [name, stat] : res.defense_post_asr) csv << ',' << csv_num(stat.mean);
  csv << '\n';
  csv << "stddev," << csv_num(res.asr.stddev) << ',' << csv_num(res.cad.stddev) << ','
      << csv_num(res.diversity.stddev);
  for (const auto& [name, stat] : res.defense_post_asr) csv << ',' << csv_num(stat.stddev);
  csv << '\n';
  csv << "high_variance," << (res.asr.high_variance ? 1 : 0) << ','
      << (res.cad.high_variance ? 1 : 0) << ',' << (res.diversity.high_variance ? 1 : 0);
  for (const auto& [name, stat] : res.defense_post_asr)
    csv << ',' << (stat.high_variance ? 1 : 0);
  csv << '\n';
  write_file(cfg.out_dir + "/report.csv", csv.str());
  return res;
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& cfg, bool resume) {
  validate(cfg);
  fs::create_directories(cfg.out_dir);
  std::string snap = experiment_json_string(cfg);
  std::string p = cfg.out_dir + "/config.json";
  if (fs::exists(p) && read_file(p) != snap && resume)
    throw ConfigError("out_dir '" + cfg.out_dir +
                      "' holds a different config; refusing to resume");
  write_file(p, snap);
  std::vector<TrialResult> trials;
  for (std::uint64_t seed : cfg.trial_seeds) {
    TrialRunner runner(cfg, seed, resume);
    trials.push_back(runner.run_all());
  }
  return aggregate_and_write(cfg, std::move(trials));
}

PipelineResult aggregate_reports(const ExperimentConfig& cfg) {
  validate(cfg);
  std::vector<TrialResult> trials;
  for (std::uint64_t seed : cfg.trial_seeds) {
    std::string dir = cfg.out_dir + "/trial_" + std::to_string(seed);
    TrialResult t;
    t.seed = seed;
    t.eval = load_eval_report_json(dir + "/eval.json");
    std::vector<std::string> names;
    if (cfg.defense_csd) names.push_back("csd");
    if (cfg.defense_prune) names.push_back("prune");
    if (cfg.defense_od) names.push_back("od");
    for (const auto& name : names)
      t.defenses.push_back(load_defense_eval_json(dir + "/defense_" + name + ".json"));
    trials.push_back(std::move(t));
  }
  return aggregate_and_write(cfg, std::move(trials));
}

}  // namespace hgl
