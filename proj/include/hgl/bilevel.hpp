#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hgl/classifier.hpp"
#include "hgl/generator.hpp"

namespace hgl {

// Poisoned forward pass of a frozen classifier with on-tape trigger features
// and connection selections. Only nodes whose activations actually change
// become tape nodes; everything else stays a clean-pass constant. On hard
// selections the victim logits match a from-scratch forward over the
// delta-applied graph exactly (same value, not just within tolerance),
// because every aggregate reproduces the plain forward's summation order.
class PoisonedForward {
 public:
  PoisonedForward(Tape& tape, const RelationalClassifier& frozen, const HeteroGraph& g,
                  const SchemaRoles& roles, const ForwardActivations& clean,
                  const CandidatePool& pool, const std::vector<TriggerSpec>& triggers);

  // {1, C} logits row for one primary node.
  Var logits_row(NodeId v);
  // {n, C} logits, rows in the given order.
  Var logits_rows(const std::vector<NodeId>& nodes);

 private:
  struct NodeState {
    bool affected = false;
    Var var;  // valid iff affected
  };
  struct AddedLink {
    int trig = -1;       // trigger index
    int aux_index = -1;  // -1: unconditional victim link; else weighted pool link
    int pool_pos = -1;
  };

  // Returned by value: recursion grows the memo map, which would invalidate
  // references into it.
  NodeState corrected(int layer, TypeId t, NodeId n);
  Var trigger_pre(int layer, int trig);
  Var existing_pre(int layer, TypeId t, NodeId n);
  Var channel_aggregate(int prev_layer, int rel, bool incoming, NodeId n);
  Var trig_channel_aggregate(int prev_layer, int rel, bool incoming, int trig);
  // Clean h_{prev_layer} rows of one type's pool members, with affected
  // members swapped for their corrected vars; rows in pool (ascending id)
  // order.
  Var assembled_pool(int prev_layer, std::size_t aux_index);
  Var weight_var(int trig, int aux_index, int pool_pos);
  Var clean_row(int layer, TypeId t, NodeId n);
  // Mirrors the plain forward's mean-aggregate arithmetic on clean constants.
  Tensor clean_mean(int prev_layer, TypeId src_t, const std::vector<int>& list) const;

  Tape& tape_;
  const RelationalClassifier& model_;
  const HeteroGraph& g_;
  const SchemaRoles& roles_;
  const ForwardActivations& clean_;
  const CandidatePool& pool_;
  const std::vector<TriggerSpec>& triggers_;

  // Frozen parameters as tape constants.
  std::vector<Var> proj_w_, proj_b_;
  std::vector<Var> self_w_;
  std::vector<std::vector<Var>> chan_w_;
  Var head_w_, head_b_;

  int base_trigger_ = 0;  // clean trigger-node count; new ids start here
  std::vector<std::size_t> aux_slot_;  // TypeId -> index into roles.auxiliary (or npos)
  // Per relation: existing node -> links gained, ordered by trigger index.
  std::vector<std::unordered_map<NodeId, std::vector<AddedLink>>> added_in_, added_out_;
  // Per relation and trigger side: -1 none, 0 victim link, aux_index >= 0 pool links.
  struct TriggerSide {
    bool victim_in = false, victim_out = false;
    int aux_in = -1, aux_out = -1;
  };
  std::vector<TriggerSide> trig_side_;  // per relation

  std::unordered_map<std::int64_t, NodeState> memo_;
  std::unordered_map<std::int64_t, Var> pool_memo_;    // (layer, aux) -> assembled rows
  std::unordered_map<std::int64_t, Var> weight_memo_;  // (trig, aux, pos) -> {1,1}
  std::unordered_map<std::int64_t, Var> clean_memo_;   // (layer, type, node) -> const row
};

struct BilevelConfig {
  int iterations = 100;
  int inner_steps = 5;     // surrogate updates per iteration
  int victim_batch = 32;   // victims per generator update
  double lambda_div = 1.0;
  OptimizerConfig surrogate_opt;
  OptimizerConfig generator_opt;
  std::string log_path;  // per-iteration CSV; empty disables
};

struct BilevelIterStats {
  int iteration = 0;
  double surrogate_loss = 0.0;  // mean over the inner steps
  double generator_loss = 0.0;  // attack term + weighted diversity term
  double diversity_loss = 0.0;
  double train_asr = 0.0;       // fraction of the outer batch pushed to the target class
};

struct BilevelResult {
  RelationalClassifier surrogate;
  TriggerGenerator generator;
  std::vector<BilevelIterStats> trace;
  Warnings warnings;
};

// Alternating optimization: each iteration trains the surrogate for
// inner_steps on a freshly triggered poisoned graph (victims relabeled to the
// target class), then takes one generator step against the frozen surrogate
// through the poisoned forward, plus the weighted diversity penalty.
BilevelResult run_bilevel(const RelationalClassifier& surrogate0, const TriggerGenerator& gen0,
                          const HeteroGraph& g, const SchemaRoles& roles,
                          const CandidatePool& pool, const AttackTargets& targets,
                          const AdaINStats& stats, const BilevelConfig& cfg, Rng& rng);

}  // namespace hgl
