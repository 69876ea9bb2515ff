#include "hgl/graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <tuple>

#include <json.hpp>

#include "hgl/errors.hpp"

namespace hgl {

namespace {

// Collects violations and throws once, reporting at most the first 10.
class ViolationLog {
 public:
  explicit ViolationLog(std::string context) : context_(std::move(context)) {}
  void add(const std::string& v) {
    ++total_;
    if (items_.size() < 10) items_.push_back(v);
  }
  bool any() const { return total_ > 0; }
  void throw_if_any() const {
    if (!any()) return;
    std::string head = context_ + ": " + std::to_string(total_) + " violation(s)";
    if (total_ > 10) head += " (showing first 10)";
    throw SchemaError(head, items_);
  }

 private:
  std::string context_;
  std::vector<std::string> items_;
  std::size_t total_ = 0;
};

}  // namespace

HeteroGraph::HeteroGraph(std::vector<std::string> type_names, std::vector<Tensor> features,
                         std::vector<Relation> relations,
                         std::vector<std::vector<std::pair<NodeId, NodeId>>> edges)
    : type_names_(std::move(type_names)),
      features_(std::move(features)),
      relations_(std::move(relations)) {
  ViolationLog log("HeteroGraph");
  if (type_names_.size() != features_.size())
    throw SchemaError("HeteroGraph: one feature matrix per type required");
  if (type_names_.size() + relations_.size() <= 2)
    log.add("graph is not heterogeneous: |types| + |relations| must exceed 2");
  {
    std::set<std::string> seen;
    for (const auto& n : type_names_)
      if (!seen.insert(n).second) log.add("duplicate type name '" + n + "'");
  }
  std::set<std::pair<TypeId, TypeId>> rel_seen;
  for (std::size_t r = 0; r < relations_.size(); ++r) {
    const Relation& rel = relations_[r];
    if (rel.src < 0 || rel.src >= num_types() || rel.dst < 0 || rel.dst >= num_types()) {
      log.add("relation " + std::to_string(r) + " references unknown type");
      continue;
    }
    if (rel.src == rel.dst)
      log.add("relation " + std::to_string(r) + " joins a type to itself");
    if (!rel_seen.insert({rel.src, rel.dst}).second)
      log.add("duplicate relation (" + type_names_[static_cast<std::size_t>(rel.src)] +
              "," + type_names_[static_cast<std::size_t>(rel.dst)] + ")");
  }
  if (edges.size() != relations_.size())
    throw SchemaError("HeteroGraph: one edge list per relation required");
  log.throw_if_any();

  adj_.resize(relations_.size());
  radj_.resize(relations_.size());
  edge_counts_.assign(relations_.size(), 0);
  for (std::size_t r = 0; r < relations_.size(); ++r) {
    const Relation& rel = relations_[r];
    int ns = num_nodes(rel.src), nd = num_nodes(rel.dst);
    adj_[r].resize(static_cast<std::size_t>(ns));
    radj_[r].resize(static_cast<std::size_t>(nd));
    for (const auto& [s, d] : edges[r]) {
      if (s < 0 || s >= ns)
        log.add("relation " + std::to_string(r) + ": source " + std::to_string(s) +
                " out of range");
      else if (d < 0 || d >= nd)
        log.add("relation " + std::to_string(r) + ": destination " + std::to_string(d) +
                " out of range");
      else
        adj_[r][static_cast<std::size_t>(s)].push_back(d);
    }
    for (std::size_t s = 0; s < adj_[r].size(); ++s) {
      auto& list = adj_[r][s];
      std::sort(list.begin(), list.end());
      if (std::adjacent_find(list.begin(), list.end()) != list.end())
        log.add("relation " + std::to_string(r) + ": duplicate edge from " +
                std::to_string(s));
      edge_counts_[r] += list.size();
      for (NodeId d : list) radj_[r][static_cast<std::size_t>(d)].push_back(static_cast<NodeId>(s));
    }
    for (auto& list : radj_[r]) std::sort(list.begin(), list.end());
  }
  log.throw_if_any();
}

TypeId HeteroGraph::check_type(TypeId t) const {
  if (t < 0 || t >= num_types())
    throw SchemaError("unknown type id " + std::to_string(t));
  return t;
}

TypeId HeteroGraph::type_id(const std::string& name) const {
  for (std::size_t i = 0; i < type_names_.size(); ++i)
    if (type_names_[i] == name) return static_cast<TypeId>(i);
  throw SchemaError("unknown type '" + name + "'");
}

const Relation& HeteroGraph::relation(int r) const {
  if (r < 0 || r >= num_relations())
    throw SchemaError("unknown relation id " + std::to_string(r));
  return relations_[static_cast<std::size_t>(r)];
}

int HeteroGraph::find_relation(TypeId src, TypeId dst) const {
  for (int r = 0; r < num_relations(); ++r)
    if (relations_[static_cast<std::size_t>(r)].src == src &&
        relations_[static_cast<std::size_t>(r)].dst == dst)
      return r;
  return -1;
}

int HeteroGraph::relation_id(TypeId src, TypeId dst) const {
  int r = find_relation(src, dst);
  if (r < 0)
    throw SchemaError("no relation (" + type_name(src) + "," + type_name(dst) + ")");
  return r;
}

const std::vector<NodeId>& HeteroGraph::out_neighbors(int rel, NodeId src) const {
  const Relation& r = relation(rel);
  if (src < 0 || src >= num_nodes(r.src))
    throw SchemaError("out_neighbors: node " + std::to_string(src) + " out of range for '" +
                      type_name(r.src) + "'");
  return adj_[static_cast<std::size_t>(rel)][static_cast<std::size_t>(src)];
}

const std::vector<NodeId>& HeteroGraph::in_neighbors(int rel, NodeId dst) const {
  const Relation& r = relation(rel);
  if (dst < 0 || dst >= num_nodes(r.dst))
    throw SchemaError("in_neighbors: node " + std::to_string(dst) + " out of range for '" +
                      type_name(r.dst) + "'");
  return radj_[static_cast<std::size_t>(rel)][static_cast<std::size_t>(dst)];
}

const std::vector<std::vector<NodeId>>& HeteroGraph::out_adjacency(int rel) const {
  relation(rel);
  return adj_[static_cast<std::size_t>(rel)];
}

const std::vector<std::vector<NodeId>>& HeteroGraph::in_adjacency(int rel) const {
  relation(rel);
  return radj_[static_cast<std::size_t>(rel)];
}

bool HeteroGraph::has_edge(int rel, NodeId src, NodeId dst) const {
  const auto& list = out_neighbors(rel, src);
  return std::binary_search(list.begin(), list.end(), dst);
}

int HeteroGraph::degree(int rel, NodeId src) const {
  return static_cast<int>(out_neighbors(rel, src).size());
}

std::size_t HeteroGraph::num_edges() const {
  std::size_t s = 0;
  for (std::size_t c : edge_counts_) s += c;
  return s;
}

std::size_t HeteroGraph::num_edges(int rel) const {
  relation(rel);
  return edge_counts_[static_cast<std::size_t>(rel)];
}

std::vector<std::pair<NodeId, NodeId>> HeteroGraph::edge_list(int rel) const {
  relation(rel);
  std::vector<std::pair<NodeId, NodeId>> out;
  out.reserve(edge_counts_[static_cast<std::size_t>(rel)]);
  const auto& adj = adj_[static_cast<std::size_t>(rel)];
  for (std::size_t s = 0; s < adj.size(); ++s)
    for (NodeId d : adj[s]) out.emplace_back(static_cast<NodeId>(s), d);
  return out;
}

HeteroGraph HeteroGraph::without_edges(
    const std::vector<std::tuple<int, NodeId, NodeId>>& remove) const {
  std::set<std::tuple<int, NodeId, NodeId>> drop(remove.begin(), remove.end());
  std::vector<std::vector<std::pair<NodeId, NodeId>>> edges(relations_.size());
  for (int r = 0; r < num_relations(); ++r)
    for (const auto& [s, d] : edge_list(r))
      if (!drop.count({r, s, d})) edges[static_cast<std::size_t>(r)].emplace_back(s, d);
  return HeteroGraph(type_names_, features_, relations_, std::move(edges));
}

HeteroGraph HeteroGraph::without_incident_edges(TypeId t,
                                                const std::vector<NodeId>& nodes) const {
  check_type(t);
  std::set<NodeId> drop(nodes.begin(), nodes.end());
  std::vector<std::vector<std::pair<NodeId, NodeId>>> edges(relations_.size());
  for (int r = 0; r < num_relations(); ++r) {
    const Relation& rel = relation(r);
    for (const auto& [s, d] : edge_list(r)) {
      if (rel.src == t && drop.count(s)) continue;
      if (rel.dst == t && drop.count(d)) continue;
      edges[static_cast<std::size_t>(r)].emplace_back(s, d);
    }
  }
  return HeteroGraph(type_names_, features_, relations_, std::move(edges));
}

HeteroGraph HeteroGraph::with_features(TypeId t, Tensor features) const {
  check_type(t);
  if (!features.same_shape(features_[static_cast<std::size_t>(t)]))
    throw ShapeError("with_features: shape mismatch for type '" + type_name(t) + "'");
  std::vector<Tensor> feats = features_;
  feats[static_cast<std::size_t>(t)] = std::move(features);
  std::vector<std::vector<std::pair<NodeId, NodeId>>> edges(relations_.size());
  for (int r = 0; r < num_relations(); ++r) edges[static_cast<std::size_t>(r)] = edge_list(r);
  return HeteroGraph(type_names_, feats, relations_, std::move(edges));
}

SchemaRoles SchemaRoles::derive(const HeteroGraph& g, TypeId primary, TypeId trigger,
                                std::vector<int> labels, int num_classes, int target_class) {
  ViolationLog log("SchemaRoles");
  if (primary < 0 || primary >= g.num_types()) throw SchemaError("SchemaRoles: bad primary type");
  if (trigger < 0 || trigger >= g.num_types()) throw SchemaError("SchemaRoles: bad trigger type");
  if (primary == trigger) log.add("primary and trigger types must differ");
  if (static_cast<int>(labels.size()) != g.num_nodes(primary))
    log.add("label count " + std::to_string(labels.size()) + " != primary node count " +
            std::to_string(g.num_nodes(primary)));
  if (num_classes < 2) log.add("need at least 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= num_classes) {
      log.add("label out of range at primary node " + std::to_string(i));
      break;
    }
  if (target_class < 0 || target_class >= num_classes) log.add("target class out of range");
  log.throw_if_any();

  SchemaRoles roles;
  roles.primary = primary;
  roles.trigger = trigger;
  roles.labels = std::move(labels);
  roles.num_classes = num_classes;
  roles.target_class = target_class;
  // Auxiliary types: destinations of trigger-sourced relations.
  std::set<TypeId> aux;
  for (int r = 0; r < g.num_relations(); ++r)
    if (g.relation(r).src == trigger) aux.insert(g.relation(r).dst);
  roles.auxiliary.assign(aux.begin(), aux.end());
  return roles;
}

HeteroGraph apply_delta(const HeteroGraph& g, const SchemaRoles& roles,
                        const GraphDelta& delta) {
  ViolationLog log("apply_delta");
  int old_count = g.num_nodes(roles.trigger);
  int k = delta.count();
  if (static_cast<int>(delta.new_features.cols()) != g.feature_dim(roles.trigger))
    log.add("feature width " + std::to_string(delta.new_features.cols()) + " != trigger dim " +
            std::to_string(g.feature_dim(roles.trigger)));
  if (static_cast<int>(delta.victim_of.size()) != k)
    log.add("victim_of size != new node count");
  for (std::size_t i = 0; i < delta.victim_of.size(); ++i)
    if (delta.victim_of[i] < 0 || delta.victim_of[i] >= g.num_nodes(roles.primary))
      log.add("victim out of range for new node " + std::to_string(i));
  log.throw_if_any();

  std::vector<std::vector<std::pair<NodeId, NodeId>>> edges(
      static_cast<std::size_t>(g.num_relations()));
  std::vector<std::set<std::pair<NodeId, NodeId>>> seen(
      static_cast<std::size_t>(g.num_relations()));
  for (int r = 0; r < g.num_relations(); ++r) {
    edges[static_cast<std::size_t>(r)] = g.edge_list(r);
    seen[static_cast<std::size_t>(r)].insert(edges[static_cast<std::size_t>(r)].begin(),
                                             edges[static_cast<std::size_t>(r)].end());
  }
  auto is_new = [&](TypeId side_type, NodeId id) {
    return side_type == roles.trigger && id >= old_count && id < old_count + k;
  };
  std::size_t idx = 0;
  for (const auto& [r, s, d] : delta.new_edges) {
    std::string tag = "edge " + std::to_string(idx++) + " (" + std::to_string(s) + "->" +
                      std::to_string(d) + ")";
    if (r < 0 || r >= g.num_relations()) {
      log.add(tag + ": unknown relation");
      continue;
    }
    const Relation& rel = g.relation(r);
    int src_limit = g.num_nodes(rel.src) + (rel.src == roles.trigger ? k : 0);
    int dst_limit = g.num_nodes(rel.dst) + (rel.dst == roles.trigger ? k : 0);
    if (s < 0 || s >= src_limit) {
      log.add(tag + ": source endpoint out of range");
      continue;
    }
    if (d < 0 || d >= dst_limit) {
      log.add(tag + ": destination endpoint out of range");
      continue;
    }
    if (!is_new(rel.src, s) && !is_new(rel.dst, d)) {
      log.add(tag + ": edge does not touch an injected node");
      continue;
    }
    if (!seen[static_cast<std::size_t>(r)].insert({s, d}).second) {
      log.add(tag + ": duplicate edge");
      continue;
    }
    edges[static_cast<std::size_t>(r)].emplace_back(s, d);
  }
  log.throw_if_any();

  std::vector<Tensor> feats;
  std::vector<std::string> names;
  for (TypeId t = 0; t < g.num_types(); ++t) {
    names.push_back(g.type_name(t));
    if (t == roles.trigger) {
      const Tensor& base = g.features(t);
      Tensor merged(base.rows() + static_cast<std::size_t>(k), base.cols());
      std::copy(base.data.begin(), base.data.end(), merged.data.begin());
      std::copy(delta.new_features.data.begin(), delta.new_features.data.end(),
                merged.data.begin() + static_cast<std::ptrdiff_t>(base.numel()));
      feats.push_back(std::move(merged));
    } else {
      feats.push_back(g.features(t));
    }
  }
  std::vector<Relation> rels;
  for (int r = 0; r < g.num_relations(); ++r) rels.push_back(g.relation(r));
  return HeteroGraph(std::move(names), std::move(feats), std::move(rels), std::move(edges));
}

std::vector<NodeId> two_hop_aux_neighbors(const HeteroGraph& g, const SchemaRoles& roles,
                                          NodeId v, TypeId aux_type) {
  int r1 = g.relation_id(roles.primary, roles.trigger);
  int r2 = g.relation_id(roles.trigger, aux_type);
  std::set<NodeId> out;
  for (NodeId w : g.out_neighbors(r1, v))
    for (NodeId u : g.out_neighbors(r2, w)) out.insert(u);
  return {out.begin(), out.end()};
}

namespace {

using json = nlohmann::ordered_json;

}  // namespace

LoadedGraph load_graph_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open graph file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const std::exception& e) {
    throw SchemaError("graph file '" + path + "': invalid JSON: " + e.what());
  }
  ViolationLog log("graph file '" + path + "'");

  std::vector<std::string> names;
  std::vector<Tensor> feats;
  if (!doc.contains("node_types") || !doc["node_types"].is_object())
    throw SchemaError("graph file '" + path + "': missing node_types object");
  for (auto& [name, spec] : doc["node_types"].items()) {
    names.push_back(name);
    std::size_t count = spec.value("count", 0);
    std::size_t dim = spec.value("feature_dim", 0);
    Tensor f(count, dim);
    if (!spec.contains("features") || !spec["features"].is_array() ||
        spec["features"].size() != count * dim) {
      log.add("type '" + name + "': features length != count * feature_dim");
    } else {
      for (std::size_t i = 0; i < f.data.size(); ++i)
        f.data[i] = spec["features"][i].get<double>();
    }
    feats.push_back(std::move(f));
  }
  auto find_type = [&](const std::string& n) -> int {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == n) return static_cast<int>(i);
    return -1;
  };

  std::vector<Relation> rels;
  std::vector<std::vector<std::pair<NodeId, NodeId>>> edges;
  for (auto& r : doc.value("relations", json::array())) {
    int src = find_type(r.value("src", ""));
    int dst = find_type(r.value("dst", ""));
    if (src < 0 || dst < 0) {
      log.add("relation references unknown type '" + r.value("src", "") + "' or '" +
              r.value("dst", "") + "'");
      continue;
    }
    rels.push_back({src, dst});
    std::vector<std::pair<NodeId, NodeId>> e;
    for (auto& pair : r.value("edges", json::array())) {
      if (!pair.is_array() || pair.size() != 2) {
        log.add("malformed edge entry in relation (" + names[static_cast<std::size_t>(src)] +
                "," + names[static_cast<std::size_t>(dst)] + ")");
        continue;
      }
      e.emplace_back(pair[0].get<int>(), pair[1].get<int>());
    }
    edges.push_back(std::move(e));
  }
  log.throw_if_any();

  if (!doc.contains("roles")) throw SchemaError("graph file '" + path + "': missing roles");
  const auto& rj = doc["roles"];
  int primary = find_type(rj.value("primary", ""));
  int trigger = find_type(rj.value("trigger", ""));
  if (primary < 0) log.add("roles.primary references unknown type");
  if (trigger < 0) log.add("roles.trigger references unknown type");
  std::vector<int> labels;
  for (auto& l : rj.value("labels", json::array())) labels.push_back(l.get<int>());
  int target = rj.value("target_class", -1);
  log.throw_if_any();

  int num_classes = target + 1;
  for (int l : labels) num_classes = std::max(num_classes, l + 1);

  // Graph construction and role derivation run their own validation; fold
  // their findings under this file's context.
  try {
    HeteroGraph g(names, feats, rels, edges);
    SchemaRoles roles = SchemaRoles::derive(g, primary, trigger, labels, num_classes, target);
    return LoadedGraph{std::move(g), std::move(roles)};
  } catch (const SchemaError& e) {
    throw SchemaError("graph file '" + path + "': " + e.what());
  }
}

void save_graph_json(const std::string& path, const HeteroGraph& g, const SchemaRoles& roles) {
  json doc;
  json types = json::object();
  for (TypeId t = 0; t < g.num_types(); ++t) {
    json spec;
    spec["count"] = g.num_nodes(t);
    spec["feature_dim"] = g.feature_dim(t);
    spec["features"] = g.features(t).data;
    types[g.type_name(t)] = std::move(spec);
  }
  doc["node_types"] = std::move(types);
  json rels = json::array();
  for (int r = 0; r < g.num_relations(); ++r) {
    json rj;
    rj["src"] = g.type_name(g.relation(r).src);
    rj["dst"] = g.type_name(g.relation(r).dst);
    json e = json::array();
    for (const auto& [s, d] : g.edge_list(r)) e.push_back(json::array({s, d}));
    rj["edges"] = std::move(e);
    rels.push_back(std::move(rj));
  }
  doc["relations"] = std::move(rels);
  json rj;
  rj["primary"] = g.type_name(roles.primary);
  rj["trigger"] = g.type_name(roles.trigger);
  rj["target_class"] = roles.target_class;
  rj["labels"] = roles.labels;
  doc["roles"] = std::move(rj);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write graph file '" + path + "'");
  out << doc.dump(1) << "\n";
}

}  // namespace hgl
