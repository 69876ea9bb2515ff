#include "hgl/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "hgl/errors.hpp"

namespace hgl {

namespace {

Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  double std = std::sqrt(2.0 / static_cast<double>(rows + cols));
  for (double& x : t.data) x = rng.normal() * std;
  return t;
}

// Non-owning view of adjacency storage for the tape op; the graph outlives
// every tape built over it.
std::shared_ptr<const std::vector<std::vector<int>>> alias_lists(
    const std::vector<std::vector<int>>& ref) {
  return {std::shared_ptr<void>(), &ref};
}

}  // namespace

RelationalClassifier RelationalClassifier::init(const HeteroGraph& g, const SchemaRoles& roles,
                                                ClassifierConfig cfg, Rng& rng) {
  if (cfg.hidden < 1) throw ConfigError("classifier: hidden width must be positive");
  if (cfg.layers < 0) throw ConfigError("classifier: negative layer count");
  RelationalClassifier m;
  m.cfg = cfg;
  m.num_classes = roles.num_classes;
  m.primary = roles.primary;
  std::size_t h = static_cast<std::size_t>(cfg.hidden);
  for (TypeId t = 0; t < g.num_types(); ++t) {
    m.input_dims.push_back(g.feature_dim(t));
    m.proj_w.push_back(glorot(h, static_cast<std::size_t>(g.feature_dim(t)), rng));
    m.proj_b.push_back(Tensor(1, h));
  }
  for (int r = 0; r < g.num_relations(); ++r) m.relations.push_back(g.relation(r));
  for (int l = 0; l < cfg.layers; ++l) {
    m.self_w.push_back(glorot(h, h, rng));
    std::vector<Tensor> cw;
    for (std::size_t c = 0; c < m.relations.size() * 2; ++c) cw.push_back(glorot(h, h, rng));
    m.chan_w.push_back(std::move(cw));
  }
  m.head_w = glorot(static_cast<std::size_t>(m.num_classes), h, rng);
  m.head_b = Tensor(1, static_cast<std::size_t>(m.num_classes));
  return m;
}

std::vector<Tensor*> RelationalClassifier::params() {
  std::vector<Tensor*> out;
  for (auto& t : proj_w) out.push_back(&t);
  for (auto& t : proj_b) out.push_back(&t);
  for (int l = 0; l < cfg.layers; ++l) {
    out.push_back(&self_w[static_cast<std::size_t>(l)]);
    for (auto& t : chan_w[static_cast<std::size_t>(l)]) out.push_back(&t);
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

std::vector<const Tensor*> RelationalClassifier::params() const {
  auto mut = const_cast<RelationalClassifier*>(this)->params();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> RelationalClassifier::param_names() const {
  std::vector<std::string> out;
  for (std::size_t t = 0; t < proj_w.size(); ++t) out.push_back("proj_w." + std::to_string(t));
  for (std::size_t t = 0; t < proj_b.size(); ++t) out.push_back("proj_b." + std::to_string(t));
  for (int l = 0; l < cfg.layers; ++l) {
    out.push_back("self_w." + std::to_string(l));
    for (std::size_t c = 0; c < chan_w[static_cast<std::size_t>(l)].size(); ++c)
      out.push_back("chan_w." + std::to_string(l) + "." + std::to_string(c));
  }
  out.push_back("head_w");
  out.push_back("head_b");
  return out;
}

bool RelationalClassifier::matches_schema(const HeteroGraph& g) const {
  if (static_cast<int>(input_dims.size()) != g.num_types()) return false;
  for (TypeId t = 0; t < g.num_types(); ++t)
    if (input_dims[static_cast<std::size_t>(t)] != g.feature_dim(t)) return false;
  if (static_cast<int>(relations.size()) != g.num_relations()) return false;
  for (int r = 0; r < g.num_relations(); ++r)
    if (relations[static_cast<std::size_t>(r)].src != g.relation(r).src ||
        relations[static_cast<std::size_t>(r)].dst != g.relation(r).dst)
      return false;
  return true;
}

TapeForward build_forward(Tape& tape, const RelationalClassifier& m, const HeteroGraph& g,
                          const TapeForwardOptions& opt) {
  if (!m.matches_schema(g))
    throw SchemaError("classifier/graph schema mismatch in forward");
  TapeForward out;
  auto lift = [&](const Tensor& t, bool as_input) {
    Var v = as_input ? tape.input(t) : tape.constant(t);
    if (as_input) out.param_vars.push_back(v);
    return v;
  };
  // Parameter vars in params() order.
  std::vector<Var> proj_w, proj_b;
  for (const auto& t : m.proj_w) proj_w.push_back(lift(t, opt.params_as_inputs));
  for (const auto& t : m.proj_b) proj_b.push_back(lift(t, opt.params_as_inputs));
  std::vector<Var> self_w;
  std::vector<std::vector<Var>> chan_w;
  for (int l = 0; l < m.cfg.layers; ++l) {
    self_w.push_back(lift(m.self_w[static_cast<std::size_t>(l)], opt.params_as_inputs));
    std::vector<Var> cw;
    for (const auto& t : m.chan_w[static_cast<std::size_t>(l)])
      cw.push_back(lift(t, opt.params_as_inputs));
    chan_w.push_back(std::move(cw));
  }
  Var head_w = lift(m.head_w, opt.params_as_inputs);
  Var head_b = lift(m.head_b, opt.params_as_inputs);

  std::vector<Var> h;
  for (TypeId t = 0; t < g.num_types(); ++t) {
    Var x = opt.features_as_inputs ? tape.input(g.features(t)) : tape.constant(g.features(t));
    if (opt.features_as_inputs) out.feature_vars.push_back(x);
    h.push_back(tape.add(tape.matmul_nt(x, proj_w[static_cast<std::size_t>(t)]),
                         proj_b[static_cast<std::size_t>(t)]));
  }
  for (int l = 0; l < m.cfg.layers; ++l) {
    std::vector<Var> next(h.size());
    for (TypeId t = 0; t < g.num_types(); ++t) {
      Var pre = tape.matmul_nt(h[static_cast<std::size_t>(t)],
                               self_w[static_cast<std::size_t>(l)]);
      for (int r = 0; r < g.num_relations(); ++r) {
        const Relation& rel = g.relation(r);
        if (rel.dst == t) {
          Var agg = tape.mean_over_neighbors(h[static_cast<std::size_t>(rel.src)],
                                             alias_lists(g.in_adjacency(r)));
          pre = tape.add(pre, tape.matmul_nt(agg, chan_w[static_cast<std::size_t>(l)]
                                                       [static_cast<std::size_t>(2 * r)]));
        }
        if (rel.src == t) {
          Var agg = tape.mean_over_neighbors(h[static_cast<std::size_t>(rel.dst)],
                                             alias_lists(g.out_adjacency(r)));
          pre = tape.add(pre, tape.matmul_nt(agg, chan_w[static_cast<std::size_t>(l)]
                                                       [static_cast<std::size_t>(2 * r + 1)]));
        }
      }
      next[static_cast<std::size_t>(t)] = tape.gelu(tape.layer_norm(pre));
    }
    h = std::move(next);
  }
  out.logits = tape.add(tape.matmul_nt(h[static_cast<std::size_t>(m.primary)], head_w), head_b);
  return out;
}

ForwardActivations forward_activations(const RelationalClassifier& m, const HeteroGraph& g) {
  // Constants-only tape pass, snapshotting every layer's hidden states.
  Tape tape;
  if (!m.matches_schema(g))
    throw SchemaError("classifier/graph schema mismatch in forward");
  ForwardActivations out;
  std::vector<Var> h;
  for (TypeId t = 0; t < g.num_types(); ++t) {
    Var x = tape.constant(g.features(t));
    Var w = tape.constant(m.proj_w[static_cast<std::size_t>(t)]);
    Var b = tape.constant(m.proj_b[static_cast<std::size_t>(t)]);
    h.push_back(tape.add(tape.matmul_nt(x, w), b));
  }
  auto snapshot = [&](const std::vector<Var>& layer) {
    std::vector<Tensor> row;
    for (Var v : layer) row.push_back(tape.val(v));
    out.hidden.push_back(std::move(row));
  };
  snapshot(h);
  for (int l = 0; l < m.cfg.layers; ++l) {
    std::vector<Var> next(h.size());
    Var sw = tape.constant(m.self_w[static_cast<std::size_t>(l)]);
    for (TypeId t = 0; t < g.num_types(); ++t) {
      Var pre = tape.matmul_nt(h[static_cast<std::size_t>(t)], sw);
      for (int r = 0; r < g.num_relations(); ++r) {
        const Relation& rel = g.relation(r);
        if (rel.dst == t) {
          Var agg = tape.mean_over_neighbors(h[static_cast<std::size_t>(rel.src)],
                                             alias_lists(g.in_adjacency(r)));
          Var w = tape.constant(m.chan_w[static_cast<std::size_t>(l)][static_cast<std::size_t>(2 * r)]);
          pre = tape.add(pre, tape.matmul_nt(agg, w));
        }
        if (rel.src == t) {
          Var agg = tape.mean_over_neighbors(h[static_cast<std::size_t>(rel.dst)],
                                             alias_lists(g.out_adjacency(r)));
          Var w = tape.constant(
              m.chan_w[static_cast<std::size_t>(l)][static_cast<std::size_t>(2 * r + 1)]);
          pre = tape.add(pre, tape.matmul_nt(agg, w));
        }
      }
      next[static_cast<std::size_t>(t)] = tape.gelu(tape.layer_norm(pre));
    }
    h = std::move(next);
    snapshot(h);
  }
  Var logits = tape.add(
      tape.matmul_nt(h[static_cast<std::size_t>(m.primary)], tape.constant(m.head_w)),
      tape.constant(m.head_b));
  out.logits = tape.val(logits);
  return out;
}

Tensor forward_logits(const RelationalClassifier& m, const HeteroGraph& g) {
  Tape tape;
  TapeForward tf = build_forward(tape, m, g, {});
  return tape.val(tf.logits);
}

int argmax_class(const double* row, int classes) {
  int best = 0;
  for (int c = 1; c < classes; ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

std::vector<int> predict(const RelationalClassifier& m, const HeteroGraph& g) {
  Tensor logits = forward_logits(m, g);
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i)
    out[i] = argmax_class(logits.row_ptr(i), m.num_classes);
  return out;
}

double accuracy(const RelationalClassifier& m, const HeteroGraph& g,
                const std::vector<NodeId>& nodes, const std::vector<int>& labels) {
  if (nodes.empty()) return 0.0;
  std::vector<int> preds = predict(m, g);
  int hits = 0;
  for (NodeId v : nodes)
    if (preds[static_cast<std::size_t>(v)] == labels[static_cast<std::size_t>(v)]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(nodes.size());
}

TrainResult train_clean(const RelationalClassifier& init, const HeteroGraph& g,
                        const std::vector<int>& labels, const std::vector<NodeId>& train,
                        const std::vector<NodeId>& val, const TrainConfig& cfg) {
  if (train.empty()) throw ConfigError("train_clean: empty train split");
  RelationalClassifier model = init;
  AdamW opt(cfg.optimizer);
  std::vector<int> train_labels;
  train_labels.reserve(train.size());
  for (NodeId v : train) train_labels.push_back(labels[static_cast<std::size_t>(v)]);

  TrainResult result;
  result.model = model;
  result.best_val_acc = -1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape tape;
    TapeForwardOptions fopt;
    fopt.params_as_inputs = true;
    TapeForward tf = build_forward(tape, model, g, fopt);
    Var picked = tape.select_rows(tf.logits, train);
    Var loss = tape.cross_entropy(picked, train_labels);
    tape.backward(loss);

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = tape.val(loss).data[0];
    const Tensor& logits = tape.val(tf.logits);
    int hits = 0;
    for (NodeId v : train)
      if (argmax_class(logits.row_ptr(static_cast<std::size_t>(v)), model.num_classes) ==
          labels[static_cast<std::size_t>(v)])
        ++hits;
    stats.train_acc = static_cast<double>(hits) / static_cast<double>(train.size());

    std::vector<Tensor*> params = model.params();
    std::vector<const Tensor*> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      grads.push_back(&tape.grad(tf.param_vars[i]));
    opt.step(params, grads);

    stats.val_acc = val.empty() ? 0.0 : accuracy(model, g, val, labels);
    result.trace.push_back(stats);
    if (stats.val_acc > result.best_val_acc) {
      result.best_val_acc = stats.val_acc;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  if (cfg.epochs == 0) result.model = model;
  return result;
}

std::vector<Tensor> input_gradient(const RelationalClassifier& m, const HeteroGraph& g,
                                   NodeId node, int cls) {
  if (node < 0 || node >= g.num_nodes(m.primary))
    throw SchemaError("input_gradient: node out of range");
  if (cls < 0 || cls >= m.num_classes)
    throw SchemaError("input_gradient: class out of range");
  Tape tape;
  TapeForwardOptions opt;
  opt.features_as_inputs = true;
  TapeForward tf = build_forward(tape, m, g, opt);
  Tensor seed(tape.val(tf.logits).rows(), tape.val(tf.logits).cols());
  seed.at(static_cast<std::size_t>(node), static_cast<std::size_t>(cls)) = 1.0;
  tape.backward_from(tf.logits, seed);
  std::vector<Tensor> out;
  for (Var v : tf.feature_vars) out.push_back(tape.grad(v));
  return out;
}

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
  const auto& d = j.at("data");
  if (d.size() != t.numel()) throw ConfigError("checkpoint tensor size mismatch");
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = d[i].get<double>();
  return t;
}
}  // namespace

void save_classifier_json(const std::string& path, const RelationalClassifier& m) {
  json doc;
  doc["format_version"] = 1;
  doc["kind"] = "relational_classifier";
  doc["hidden"] = m.cfg.hidden;
  doc["layers"] = m.cfg.layers;
  doc["num_classes"] = m.num_classes;
  doc["primary"] = m.primary;
  doc["input_dims"] = m.input_dims;
  json rels = json::array();
  for (const auto& r : m.relations) rels.push_back(json::array({r.src, r.dst}));
  doc["relations"] = std::move(rels);
  json params = json::object();
  auto names = m.param_names();
  auto tensors = m.params();
  for (std::size_t i = 0; i < names.size(); ++i) params[names[i]] = tensor_to_json(*tensors[i]);
  doc["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out << doc.dump(1) << "\n";
}

RelationalClassifier load_classifier_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  json doc;
  in >> doc;
  if (doc.value("format_version", 0) != 1 || doc.value("kind", "") != "relational_classifier")
    throw ConfigError("checkpoint '" + path + "' is not a classifier checkpoint");
  RelationalClassifier m;
  m.cfg.hidden = doc.at("hidden").get<int>();
  m.cfg.layers = doc.at("layers").get<int>();
  m.num_classes = doc.at("num_classes").get<int>();
  m.primary = doc.at("primary").get<TypeId>();
  m.input_dims = doc.at("input_dims").get<std::vector<int>>();
  for (const auto& r : doc.at("relations"))
    m.relations.push_back({r[0].get<TypeId>(), r[1].get<TypeId>()});
  std::size_t h = static_cast<std::size_t>(m.cfg.hidden);
  for (std::size_t t = 0; t < m.input_dims.size(); ++t) {
    m.proj_w.push_back(Tensor(h, static_cast<std::size_t>(m.input_dims[t])));
    m.proj_b.push_back(Tensor(1, h));
  }
  for (int l = 0; l < m.cfg.layers; ++l) {
    m.self_w.push_back(Tensor(h, h));
    m.chan_w.emplace_back(m.relations.size() * 2, Tensor(h, h));
  }
  m.head_w = Tensor(static_cast<std::size_t>(m.num_classes), h);
  m.head_b = Tensor(1, static_cast<std::size_t>(m.num_classes));
  auto names = m.param_names();
  auto tensors = m.params();
  const auto& params = doc.at("params");
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor loaded = tensor_from_json(params.at(names[i]));
    if (!loaded.same_shape(*tensors[i]))
      throw ConfigError("checkpoint '" + path + "': shape mismatch for " + names[i]);
    *tensors[i] = std::move(loaded);
  }
  return m;
}

}  // namespace hgl
