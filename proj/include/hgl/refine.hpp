#pragma once

#include <string>
#include <vector>

#include "hgl/bilevel.hpp"

namespace hgl {

// x {n, d} -> x W^T + b, with W {d, d} and b {1, d}.
Var affine_tape(Tape& tape, Var x, Var w, Var b);

// Median pairwise Euclidean distance over the rows of x and y pooled
// together, scaled by each entry of scales; a zero median degrades to 1.0.
std::vector<double> median_bandwidths(const Tensor& x, const Tensor& y,
                                      const std::vector<double>& scales);

// Biased (V-statistic) squared MMD under the mean of Gaussian kernels:
// mean(Kxx) + mean(Kyy) - 2 mean(Kxy).
Var mmd_tape(Tape& tape, Var x, Var y, const std::vector<double>& gammas);

// Spectral condition-number estimate of w via power iteration on w^T w
// (largest eigenvalue, then largest of its reflection for the smallest).
double condition_estimate(const Tensor& w, int iterations = 300);

struct RefineConfig {
  int steps = 200;
  double lambda_attack = 1.0;
  std::vector<double> bandwidth_scales = {0.5, 1.0, 2.0};
  // "clean": match the clean trigger-type feature rows; "raw": stay close to
  // the unrefined generator output.
  std::string mmd_reference = "clean";
  OptimizerConfig optimizer{.lr = 1e-2};
  std::string log_path;  // per-step CSV; empty disables
};

struct AffineRefinement {
  Tensor w, b;
};

struct RefineStepStats {
  int step = 0;            // losses are evaluated before this step's update
  double mmd = 0.0;
  double attack = 0.0;
  double condition = 1.0;  // condition estimate of w at evaluation time
};

struct RefineResult {
  AffineRefinement affine;
  std::vector<RefineStepStats> trace;  // steps + 1 rows; last is post-training
  Warnings warnings;
};

// Post-hoc affine refinement of generated trigger features: starting from the
// identity map, minimize MMD to the reference distribution plus the attack
// cross-entropy of the frozen surrogate on the fixed trigger structure. Never
// modifies the generator or the surrogate; returns the affine map to pass to
// generate_delta. The first trace row is evaluated at the identity, so its
// losses equal the unrefined MMD and attack loss exactly.
RefineResult run_refinement(const RelationalClassifier& surrogate, const TriggerGenerator& gen,
                            const HeteroGraph& g, const SchemaRoles& roles,
                            const CandidatePool& pool, const std::vector<NodeId>& victims,
                            const AdaINStats& stats, const RefineConfig& cfg, Rng& rng);

}  // namespace hgl
