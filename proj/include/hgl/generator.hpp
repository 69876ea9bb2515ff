#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hgl/candidates.hpp"
#include "hgl/graph.hpp"
#include "hgl/rng.hpp"
#include "hgl/tape.hpp"

namespace hgl {

using Warnings = std::vector<std::string>;

struct GeneratorConfig {
  int noise_dim = 16;
  int heads = 2;
  int head_dim = 8;
  int hidden = 64;
  double p_mask = 0.2;
  double gumbel_temp = 0.5;
  double tau = 0.3;              // diversity hinge margin
  int triggers_per_victim = 3;
  bool use_adain = true;
  double adain_eps = 1e-8;
};

// Clean per-dimension mean and population std of the trigger type, captured
// once from the clean graph and reused for every normalization.
struct AdaINStats {
  Tensor mu;     // {1, d}
  Tensor sigma;  // {1, d}
  double eps = 1e-8;
  static AdaINStats from_features(const Tensor& clean, double eps = 1e-8);
};

// Victim-conditioned trigger synthesizer: a feature MLP mapping victim
// features to raw trigger features, plus an attention block (query MLP over
// [victim, trigger feature, noise]; per-auxiliary-type key MLPs) that scores
// every pool candidate for connection.
struct TriggerGenerator {
  GeneratorConfig cfg;
  int victim_dim = 0, trigger_dim = 0;
  std::vector<TypeId> aux_types;
  std::vector<int> aux_dims;

  // Feature MLP: two gelu(layer_norm(linear)) hidden layers, linear out.
  Tensor fw1, fb1, fw2, fb2, fw3, fb3;
  // Query MLP: one hidden layer, output heads*head_dim.
  Tensor qw1, qb1, qw2, qb2;
  // Per-aux-type key MLP, same shape scheme.
  std::vector<std::array<Tensor, 4>> key;  // {kw1, kb1, kw2, kb2}

  static TriggerGenerator init(const HeteroGraph& g, const SchemaRoles& roles,
                               GeneratorConfig cfg, Rng& rng);
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  std::vector<std::string> param_names() const;
};

// Tape handles for the generator parameters, aligned with params() order.
struct GenVars {
  Var fw1, fb1, fw2, fb2, fw3, fb3;
  Var qw1, qb1, qw2, qb2;
  std::vector<std::array<Var, 4>> key;
  std::vector<Var> flat;
};
GenVars lift_generator(Tape& tape, const TriggerGenerator& gen, bool as_inputs);

// Raw trigger features for a batch of victims: {B, d_victim} -> {B, d_trigger}.
Var gen_features(Tape& tape, const TriggerGenerator& gen, const GenVars& vars, Var victims);

// Batch-statistics alignment: x * sigma_clean / (sigma_batch + eps) shifted to
// mu_clean. A single-row batch degrades to sigma_batch = 0 (output mu_clean)
// with a warning.
Var adain(Tape& tape, Var batch, const AdaINStats& stats, Warnings* warnings = nullptr);

// Head-averaged cosine-style attention scores: per head, unit-normalize query
// and keys, inner product scaled by 1/sqrt(head_dim), mean over heads.
// q_heads[h] is {1, dm}; k_heads[h] is {P, dm}. Result {1, P}, |entry| <=
// 1/sqrt(head_dim).
Var attention_logits(Tape& tape, const std::vector<Var>& q_heads,
                     const std::vector<Var>& k_heads);

// Key projections of one auxiliary type's pool features, split per head.
std::vector<Var> pool_key_heads(Tape& tape, const TriggerGenerator& gen, const GenVars& vars,
                                int aux_index, Var pool_features);

// Full connection-logit path for one trigger: condition = [victim_feature,
// trigger_feature, noise] row.
Var connection_logits(Tape& tape, const TriggerGenerator& gen, const GenVars& vars,
                      int aux_index, Var condition, const std::vector<Var>& key_heads);

// Selection logits with some entries masked out of the top-k competition.
struct MaskedLogits {
  Var logits;                      // {1, P}
  std::vector<std::uint8_t> masked;  // 1 = excluded
};

// Independent Bernoulli(p_mask) masking, redrawn (bounded) until at least k
// entries stay unmasked; a pool of exactly k is never masked.
MaskedLogits random_mask(Tape& tape, Var logits, double p_mask, int k, Rng& rng);

// Shift t with sum_i sigmoid(x_i + t) = k, solved by bisection (residual
// tolerance 1e-10, at most 200 iterations), plus the sigmoid derivatives at
// the shifted point and the hard top-k of x (ties to the lower index).
struct TopkState {
  double shift = 0.0;
  std::vector<double> v;                    // sigmoid'(x_i + shift) > 0
  std::vector<std::uint8_t> selection;      // exactly k ones
  double residual = 0.0;
};
TopkState solve_shift(const std::vector<double>& x, int k);

enum class SelectMode {
  kTrain,  // Gumbel-perturbed hard top-k forward
  kInfer,  // noiseless hard top-k forward
  kSoft    // relaxed sigmoid(x_i + t) forward (smooth; used by gradient checks)
};

// 0/1 (or relaxed) selection vector over the pool with the implicit-function
// backward rule r*v - (<r,v>/||v||_1) v evaluated on the noiseless logits;
// masked entries select nothing and receive zero gradient.
Var topk_select(Tape& tape, const MaskedLogits& ml, int k, double temperature, Rng& gumbel_rng,
                SelectMode mode);

// Mean over auxiliary types of the hinge-penalized pairwise inner products of
// normalized selection patterns: sum_{i != j} max(0, <p_i, p_j> - tau) /
// (B(B-1)). Types with fewer than two patterns contribute 0 with a warning.
Var diversity_loss(Tape& tape, const std::vector<std::vector<Var>>& selections_per_aux,
                   double tau, Warnings* warnings = nullptr);

// Victim link plus per-type selected pool links for each new trigger node.
// selected[t][a] holds pool-relative positions for trigger t, aux type a.
std::vector<std::tuple<int, NodeId, NodeId>> build_trigger_edges(
    const HeteroGraph& g, const SchemaRoles& roles, const CandidatePool& pool,
    const std::vector<NodeId>& victim_of,
    const std::vector<std::vector<std::vector<int>>>& selected);

// One trigger's-worth of tape state inside a poisoned forward.
struct TriggerSpec {
  NodeId victim = -1;
  Var feature;                       // {1, d_trigger}
  std::vector<Var> selection;        // per aux type {1, P_a}; invalid if pool empty
  std::vector<std::vector<int>> hard_ids;  // per aux type: selected node ids
  std::vector<std::vector<int>> pool_pos;  // per aux type: positions in pool.members
};

// Builds the full on-tape generation for a victim batch: raw features ->
// adain -> optional affine refinement -> per-trigger selections.
struct GenerationTape {
  Var features;                      // {B*multiplicity, d_trigger} refined features (row per trigger)
  std::vector<TriggerSpec> triggers;
  std::vector<Var> raw_condition;    // per trigger condition rows
};
GenerationTape generate_on_tape(Tape& tape, const TriggerGenerator& gen, const GenVars& vars,
                                const HeteroGraph& g, const SchemaRoles& roles,
                                const CandidatePool& pool, const std::vector<NodeId>& victims,
                                const AdaINStats& stats, const Tensor* refine_w,
                                const Tensor* refine_b, Rng& noise_rng, Rng& gumbel_rng,
                                Rng& mask_rng, SelectMode mode, Warnings* warnings = nullptr);

// Value-level generation: runs generate_on_tape on a private tape and
// materializes a GraphDelta plus the selection patterns per aux type.
struct GenerationResult {
  GraphDelta delta;
  std::vector<std::vector<std::vector<std::uint8_t>>> patterns;  // [aux][trigger][pool]
};
GenerationResult generate_delta(const TriggerGenerator& gen, const HeteroGraph& g,
                                const SchemaRoles& roles, const CandidatePool& pool,
                                const std::vector<NodeId>& victims, const AdaINStats& stats,
                                const Tensor* refine_w, const Tensor* refine_b, Rng& noise_rng,
                                Rng& gumbel_rng, Rng& mask_rng, SelectMode mode,
                                Warnings* warnings = nullptr);

void save_generator_json(const std::string& path, const TriggerGenerator& gen,
                         const AdaINStats& stats);
struct LoadedGenerator {
  TriggerGenerator gen;
  AdaINStats stats;
};
LoadedGenerator load_generator_json(const std::string& path);

}  // namespace hgl
