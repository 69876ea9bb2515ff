#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hgl/tensor.hpp"

namespace hgl {

using NodeId = int;
using TypeId = int;

struct Relation {
  TypeId src = -1;
  TypeId dst = -1;
};

// Immutable typed multigraph: per-type dense node ids, per-type feature
// matrices, ordered binary relations with 0/1 multiplicity (duplicate edges
// rejected). Heterogeneity requires |types| + |relations| > 2 and every
// relation to join two distinct types.
class HeteroGraph {
 public:
  HeteroGraph(std::vector<std::string> type_names, std::vector<Tensor> features,
              std::vector<Relation> relations,
              std::vector<std::vector<std::pair<NodeId, NodeId>>> edges);

  int num_types() const { return static_cast<int>(type_names_.size()); }
  const std::string& type_name(TypeId t) const { return type_names_.at(check_type(t)); }
  TypeId type_id(const std::string& name) const;      // SchemaError if unknown
  int num_nodes(TypeId t) const {
    return static_cast<int>(features_.at(check_type(t)).rows());
  }
  int feature_dim(TypeId t) const {
    return static_cast<int>(features_.at(check_type(t)).cols());
  }
  const Tensor& features(TypeId t) const { return features_.at(check_type(t)); }

  int num_relations() const { return static_cast<int>(relations_.size()); }
  const Relation& relation(int r) const;
  // -1 when absent.
  int find_relation(TypeId src, TypeId dst) const;
  // SchemaError when absent.
  int relation_id(TypeId src, TypeId dst) const;

  const std::vector<NodeId>& out_neighbors(int rel, NodeId src) const;
  const std::vector<NodeId>& in_neighbors(int rel, NodeId dst) const;
  // Whole-relation adjacency, indexed by source (out) or destination (in).
  const std::vector<std::vector<NodeId>>& out_adjacency(int rel) const;
  const std::vector<std::vector<NodeId>>& in_adjacency(int rel) const;
  bool has_edge(int rel, NodeId src, NodeId dst) const;

  // Out-degree of a source-type node under one relation.
  int degree(int rel, NodeId src) const;

  std::size_t num_edges() const;
  std::size_t num_edges(int rel) const;
  std::vector<std::pair<NodeId, NodeId>> edge_list(int rel) const;

  // Value-semantics structural edits used by defenses: drop the given edges /
  // all edges incident to the given nodes of one type.
  HeteroGraph without_edges(const std::vector<std::tuple<int, NodeId, NodeId>>& remove) const;
  HeteroGraph without_incident_edges(TypeId t, const std::vector<NodeId>& nodes) const;
  // Replace one type's feature matrix (same shape).
  HeteroGraph with_features(TypeId t, Tensor features) const;

 private:
  TypeId check_type(TypeId t) const;
  std::vector<std::string> type_names_;
  std::vector<Tensor> features_;
  std::vector<Relation> relations_;
  // adj_[r][src] sorted; radj_[r][dst] sorted.
  std::vector<std::vector<std::vector<NodeId>>> adj_;
  std::vector<std::vector<std::vector<NodeId>>> radj_;
  std::vector<std::size_t> edge_counts_;
};

// Attack-role annotation over a graph: which type carries labels (primary),
// which type gets injected (trigger), the label vector, the target class, and
// the auxiliary types (destinations of trigger-sourced relations).
struct SchemaRoles {
  TypeId primary = -1;
  TypeId trigger = -1;
  std::vector<TypeId> auxiliary;
  std::vector<int> labels;
  int num_classes = 0;
  int target_class = -1;

  static SchemaRoles derive(const HeteroGraph& g, TypeId primary, TypeId trigger,
                            std::vector<int> labels, int num_classes, int target_class);
};

// Injection: new trigger-type nodes (appended after the existing ones) plus
// their edges. Edges reference new nodes by their post-append ids.
struct GraphDelta {
  Tensor new_features;                                   // {k, d_trigger}
  std::vector<std::tuple<int, NodeId, NodeId>> new_edges;  // (relation, src, dst)
  std::vector<NodeId> victim_of;                         // per new node

  int count() const { return static_cast<int>(new_features.rows()); }
};

// Appends delta.count() trigger nodes and the delta edges; the input graph is
// unchanged. Violations (bad width, endpoint out of range, duplicate edge,
// edge not touching a new node) raise a SchemaError listing the first 10.
HeteroGraph apply_delta(const HeteroGraph& g, const SchemaRoles& roles,
                        const GraphDelta& delta);

// Two-hop auxiliary neighborhood: nodes of aux_type reachable from primary
// node v via one trigger-type intermediary, i.e. v ->(primary,trigger) w
// ->(trigger,aux) u. Sorted, deduplicated. Requires both relations to exist.
std::vector<NodeId> two_hop_aux_neighbors(const HeteroGraph& g, const SchemaRoles& roles,
                                          NodeId v, TypeId aux_type);

// Node-level split of the primary type plus the poisoned victim subsets.
struct AttackTargets {
  std::vector<NodeId> train, test, val;
  std::vector<NodeId> poison_train, poison_test;
};

// JSON graph file <-> in-memory graph (+roles). Load validates references and
// reports the first 10 violations.
struct LoadedGraph {
  HeteroGraph graph;
  SchemaRoles roles;
};
LoadedGraph load_graph_json(const std::string& path);
void save_graph_json(const std::string& path, const HeteroGraph& g, const SchemaRoles& roles);

}  // namespace hgl
