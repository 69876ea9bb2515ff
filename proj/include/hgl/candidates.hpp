#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "hgl/classifier.hpp"
#include "hgl/graph.hpp"

namespace hgl {

// Screened attachment-candidate sets, one per auxiliary type.
struct CandidatePool {
  struct TypePool {
    TypeId type = -1;
    int budget = 0;                 // per-trigger link count for this type
    std::vector<NodeId> members;    // the fold*budget top-scoring, ascending id
    std::vector<double> scores;     // aligned with members
    bool undersized = false;        // raw pool smaller than fold * budget
  };
  std::vector<TypePool> per_type;   // aligned with roles.auxiliary
  int fold = 6;
  bool saliency_fallback = false;   // scored against all target-class nodes
                                    // because none were predicted correctly

  const TypePool& for_type(TypeId t) const;
};

// Union of two-hop auxiliary neighborhoods over target-class primary nodes,
// per auxiliary type, ascending ids.
std::vector<std::vector<NodeId>> raw_pool(const HeteroGraph& g, const SchemaRoles& roles);

// Nearest-rank upper quantile (default 0.9) of trigger->aux out-degrees over
// all trigger nodes: sort ascending, take rank ceil(q*m) (1-based), round the
// value up to an integer.
int degree_budget(const HeteroGraph& g, const SchemaRoles& roles, TypeId aux_type,
                  double q = 0.9);

// Aggregate saliency of each raw-pool candidate: sum over scoring primary
// nodes of the L1 norm of d logits[v, target]/d x_candidate. Scoring nodes
// are the correctly predicted target-class primaries, or every target-class
// primary (with the fallback flag set) when none are correct.
struct SaliencyResult {
  std::vector<std::unordered_map<NodeId, double>> scores;  // per aux type
  bool fallback = false;
  int scoring_nodes = 0;
};
SaliencyResult saliency_scores(const RelationalClassifier& surrogate, const HeteroGraph& g,
                               const SchemaRoles& roles,
                               const std::vector<std::vector<NodeId>>& pools);

// Raw pools -> saliency screening -> keep the fold * budget highest-scoring
// candidates per type (all of them, flagged undersized, when fewer exist).
CandidatePool build_pool(const RelationalClassifier& surrogate, const HeteroGraph& g,
                         const SchemaRoles& roles, int fold = 6);

void save_pool_json(const std::string& path, const HeteroGraph& g, const CandidatePool& pool);
CandidatePool load_pool_json(const std::string& path, const HeteroGraph& g);

}  // namespace hgl
