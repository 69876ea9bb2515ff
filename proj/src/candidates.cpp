#include "hgl/candidates.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "hgl/errors.hpp"

namespace hgl {

const CandidatePool::TypePool& CandidatePool::for_type(TypeId t) const {
  for (const auto& p : per_type)
    if (p.type == t) return p;
  throw SchemaError("candidate pool has no entry for type id " + std::to_string(t));
}

std::vector<std::vector<NodeId>> raw_pool(const HeteroGraph& g, const SchemaRoles& roles) {
  std::vector<std::vector<NodeId>> out;
  for (TypeId aux : roles.auxiliary) {
    std::set<NodeId> members;
    for (NodeId v = 0; v < g.num_nodes(roles.primary); ++v) {
      if (roles.labels[static_cast<std::size_t>(v)] != roles.target_class) continue;
      for (NodeId u : two_hop_aux_neighbors(g, roles, v, aux)) members.insert(u);
    }
    out.emplace_back(members.begin(), members.end());
  }
  return out;
}

int degree_budget(const HeteroGraph& g, const SchemaRoles& roles, TypeId aux_type, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("degree_budget: quantile must be in (0,1]");
  int rel = g.relation_id(roles.trigger, aux_type);
  int m = g.num_nodes(roles.trigger);
  if (m == 0) throw SchemaError("degree_budget: no trigger-type nodes");
  std::vector<int> degs(static_cast<std::size_t>(m));
  for (NodeId v = 0; v < m; ++v) degs[static_cast<std::size_t>(v)] = g.degree(rel, v);
  std::sort(degs.begin(), degs.end());
  // Nearest-rank: 1-based rank ceil(q*m).
  int rank = static_cast<int>(std::ceil(q * static_cast<double>(m)));
  rank = std::max(1, std::min(rank, m));
  return degs[static_cast<std::size_t>(rank - 1)];
}

SaliencyResult saliency_scores(const RelationalClassifier& surrogate, const HeteroGraph& g,
                               const SchemaRoles& roles,
                               const std::vector<std::vector<NodeId>>& pools) {
  if (pools.size() != roles.auxiliary.size())
    throw ConfigError("saliency_scores: one pool per auxiliary type required");
  SaliencyResult result;
  result.scores.resize(pools.size());

  Tape tape;
  TapeForwardOptions opt;
  opt.features_as_inputs = true;
  TapeForward tf = build_forward(tape, surrogate, g, opt);
  const Tensor& logits = tape.val(tf.logits);

  std::vector<NodeId> scoring;
  for (NodeId v = 0; v < g.num_nodes(roles.primary); ++v) {
    if (roles.labels[static_cast<std::size_t>(v)] != roles.target_class) continue;
    if (argmax_class(logits.row_ptr(static_cast<std::size_t>(v)), surrogate.num_classes) ==
        roles.target_class)
      scoring.push_back(v);
  }
  if (scoring.empty()) {
    result.fallback = true;
    for (NodeId v = 0; v < g.num_nodes(roles.primary); ++v)
      if (roles.labels[static_cast<std::size_t>(v)] == roles.target_class) scoring.push_back(v);
  }
  result.scoring_nodes = static_cast<int>(scoring.size());
  for (std::size_t a = 0; a < pools.size(); ++a)
    for (NodeId u : pools[a]) result.scores[a][u] = 0.0;

  Tensor seed(logits.rows(), logits.cols());
  for (NodeId v : scoring) {
    tape.zero_grads();
    seed.at(static_cast<std::size_t>(v), static_cast<std::size_t>(roles.target_class)) = 1.0;
    tape.backward_from(tf.logits, seed);
    seed.at(static_cast<std::size_t>(v), static_cast<std::size_t>(roles.target_class)) = 0.0;
    for (std::size_t a = 0; a < pools.size(); ++a) {
      TypeId t = roles.auxiliary[a];
      const Tensor& grad = tape.grad(tf.feature_vars[static_cast<std::size_t>(t)]);
      for (NodeId u : pools[a]) {
        const double* row = grad.row_ptr(static_cast<std::size_t>(u));
        double l1 = 0.0;
        for (std::size_t j = 0; j < grad.cols(); ++j) l1 += std::abs(row[j]);
        result.scores[a][u] += l1;
      }
    }
  }
  return result;
}

CandidatePool build_pool(const RelationalClassifier& surrogate, const HeteroGraph& g,
                         const SchemaRoles& roles, int fold) {
  if (fold < 1) throw ConfigError("build_pool: fold must be positive");
  auto pools = raw_pool(g, roles);
  SaliencyResult sal = saliency_scores(surrogate, g, roles, pools);

  CandidatePool out;
  out.fold = fold;
  out.saliency_fallback = sal.fallback;
  for (std::size_t a = 0; a < roles.auxiliary.size(); ++a) {
    CandidatePool::TypePool tp;
    tp.type = roles.auxiliary[a];
    tp.budget = degree_budget(g, roles, tp.type);
    std::vector<NodeId> members = pools[a];
    std::sort(members.begin(), members.end(), [&](NodeId x, NodeId y) {
      double sx = sal.scores[a].at(x), sy = sal.scores[a].at(y);
      if (sx != sy) return sx > sy;
      return x < y;
    });
    std::size_t cap = static_cast<std::size_t>(fold) * static_cast<std::size_t>(tp.budget);
    if (members.size() > cap) {
      members.resize(cap);
    } else if (members.size() < cap) {
      tp.undersized = true;
    }
    // Stored in ascending node id so downstream weighted aggregations walk
    // the pool in the same order as a sorted adjacency list.
    std::sort(members.begin(), members.end());
    for (NodeId u : members) tp.scores.push_back(sal.scores[a].at(u));
    tp.members = std::move(members);
    out.per_type.push_back(std::move(tp));
  }
  return out;
}

void save_pool_json(const std::string& path, const HeteroGraph& g, const CandidatePool& pool) {
  nlohmann::ordered_json doc;
  doc["format_version"] = 1;
  doc["fold"] = pool.fold;
  doc["saliency_fallback"] = pool.saliency_fallback;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& tp : pool.per_type) {
    nlohmann::ordered_json j;
    j["type"] = g.type_name(tp.type);
    j["budget"] = tp.budget;
    j["members"] = tp.members;
    j["scores"] = tp.scores;
    j["undersized"] = tp.undersized;
    per.push_back(std::move(j));
  }
  doc["per_type"] = std::move(per);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write pool file '" + path + "'");
  out << doc.dump(1) << "\n";
}

CandidatePool load_pool_json(const std::string& path, const HeteroGraph& g) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open pool file '" + path + "'");
  nlohmann::ordered_json doc;
  in >> doc;
  CandidatePool pool;
  pool.fold = doc.at("fold").get<int>();
  pool.saliency_fallback = doc.value("saliency_fallback", false);
  for (const auto& j : doc.at("per_type")) {
    CandidatePool::TypePool tp;
    tp.type = g.type_id(j.at("type").get<std::string>());
    tp.budget = j.at("budget").get<int>();
    tp.members = j.at("members").get<std::vector<NodeId>>();
    tp.scores = j.at("scores").get<std::vector<double>>();
    tp.undersized = j.value("undersized", false);
    for (NodeId u : tp.members)
      if (u < 0 || u >= g.num_nodes(tp.type))
        throw SchemaError("pool file '" + path + "': member out of range");
    if (!std::is_sorted(tp.members.begin(), tp.members.end()) ||
        std::adjacent_find(tp.members.begin(), tp.members.end()) != tp.members.end())
      throw SchemaError("pool file '" + path + "': members must be unique and ascending");
    if (tp.scores.size() != tp.members.size())
      throw SchemaError("pool file '" + path + "': member/score count mismatch");
    pool.per_type.push_back(std::move(tp));
  }
  return pool;
}

}  // namespace hgl
