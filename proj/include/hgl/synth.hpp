#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hgl/graph.hpp"
#include "hgl/rng.hpp"

namespace hgl {

struct SynthTypeSpec {
  std::string name;
  int count = 0;
  int dim = 0;
  // Norm of the role-conditioned feature mean (the primary type ignores it;
  // every type additionally gets a latent-class mean at norm class_signal).
  double mean_scale = 0.0;
};

struct SynthRelSpec {
  std::string src, dst;
  double mean_degree = 2.0;   // target mean out-degree
  double pareto_alpha = 2.5;  // tail index (> 1 so the mean exists)
};

struct SynthSpec {
  std::vector<SynthTypeSpec> types;
  std::vector<SynthRelSpec> relations;
  std::string primary, trigger;
  int num_classes = 3;
  double class_signal = 3.0;   // norm of each class mean
  // The primary type's class means are scaled by this extra factor; values
  // below 1 push the class evidence into the neighborhood (labels become
  // mostly only inferable from neighbors, as in citation graphs).
  double primary_class_scale = 1.0;
  double feature_noise = 1.0;  // per-dimension Gaussian std
  // Probability that an edge endpoint is drawn from nodes sharing the source's
  // latent class (the rest are uniform), making neighbor aggregation carry
  // class signal the way bibliographic graphs do.
  double homophily = 0.8;
  int target_class = 0;

  // 3 types / 3 relations / 3 classes at desk scale.
  static SynthSpec default_fixture();
};

void validate(const SynthSpec& spec);

// Scale x_m of the continuous Pareto whose mean matches spec.mean_degree.
double pareto_scale(const SynthRelSpec& spec);
// Analytic 90th percentile of that continuous Pareto.
double pareto_p90(const SynthRelSpec& spec);
// One discretized draw (rounded to the nearest integer, clamped to
// [0, max_degree]).
int sample_degree(const SynthRelSpec& spec, int max_degree, Rng& rng);

// Every type gets latent classes (the primary's are the labels) and
// class-conditioned Gaussian features (non-primary types add a role mean);
// long-tailed out-degrees per relation with class-homophilous endpoints;
// fully deterministic in the seed.
LoadedGraph generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

struct SplitFractions {
  double train = 0.70, test = 0.20, val = 0.10;
  double poison = 0.05;  // of each of train and test
};

// Disjoint cover of the primary nodes plus poisoned victim subsets drawn from
// the non-target-class members of train and test (floor of the fraction, at
// least 1).
AttackTargets split_targets(int n_primary, const std::vector<int>& labels, int target_class,
                            const SplitFractions& f, Rng& rng);

// Baseline injection: every trigger shares one fixed feature vector placed 10
// population-stds from the trigger-type mean along the normalized all-ones
// direction; each trigger links to its victim plus K_{t_a} random distinct
// nodes of every auxiliary type (K from the same degree-quantile budget the
// real attack uses).
GraphDelta naive_inject(const HeteroGraph& g, const SchemaRoles& roles,
                        const std::vector<NodeId>& victims, Rng& rng);
// Overload choosing `count` victims uniformly from the non-target-class
// primary nodes.
GraphDelta naive_inject(const HeteroGraph& g, const SchemaRoles& roles, int count, Rng& rng);

}  // namespace hgl
