#include "hgl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hgl/candidates.hpp"
#include "hgl/errors.hpp"

namespace hgl {

SynthSpec SynthSpec::default_fixture() {
  SynthSpec s;
  s.types = {{"paper", 2000, 16, 0.0}, {"author", 800, 16, 12.0}, {"subject", 700, 12, 4.0}};
  s.relations = {{"paper", "author", 1.0, 3.0},
                 {"author", "paper", 6.0, 2.5},
                 {"author", "subject", 4.0, 2.5}};
  s.primary = "paper";
  s.trigger = "author";
  s.num_classes = 3;
  s.class_signal = 2.0;
  s.primary_class_scale = 0.85;
  s.feature_noise = 1.2;
  s.homophily = 0.6;
  s.target_class = 0;
  return s;
}

void validate(const SynthSpec& spec) {
  std::vector<std::string> bad;
  if (spec.types.empty()) bad.push_back("at least one node type is required");
  std::set<std::string> names;
  for (const auto& t : spec.types) {
    if (!names.insert(t.name).second) bad.push_back("duplicate type name '" + t.name + "'");
    if (t.count < 1) bad.push_back("type '" + t.name + "' must have at least one node");
    if (t.dim < 1) bad.push_back("type '" + t.name + "' must have a positive feature dim");
  }
  auto known = [&](const std::string& n) { return names.count(n) > 0; };
  if (!known(spec.primary)) bad.push_back("primary type '" + spec.primary + "' is not declared");
  if (!known(spec.trigger)) bad.push_back("trigger type '" + spec.trigger + "' is not declared");
  if (spec.primary == spec.trigger) bad.push_back("primary and trigger types must differ");
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& r : spec.relations) {
    if (!known(r.src) || !known(r.dst))
      bad.push_back("relation " + r.src + "->" + r.dst + " references an unknown type");
    if (r.src == r.dst)
      bad.push_back("relation " + r.src + "->" + r.dst + " must join distinct types");
    if (!pairs.insert({r.src, r.dst}).second)
      bad.push_back("duplicate relation " + r.src + "->" + r.dst);
    if (r.mean_degree <= 0.0)
      bad.push_back("relation " + r.src + "->" + r.dst + " needs a positive mean degree");
    if (r.pareto_alpha <= 1.0)
      bad.push_back("relation " + r.src + "->" + r.dst +
                    " needs pareto_alpha > 1 (finite mean)");
  }
  if (spec.types.size() + spec.relations.size() <= 2)
    bad.push_back("|types| + |relations| must exceed 2");
  if (spec.num_classes < 2) bad.push_back("num_classes must be at least 2");
  if (spec.target_class < 0 || spec.target_class >= spec.num_classes)
    bad.push_back("target_class out of range");
  if (spec.class_signal <= 0.0) bad.push_back("class_signal must be positive");
  if (spec.primary_class_scale < 0.0) bad.push_back("primary_class_scale must be non-negative");
  if (spec.feature_noise <= 0.0) bad.push_back("feature_noise must be positive");
  if (spec.homophily < 0.0 || spec.homophily >= 1.0)
    bad.push_back("homophily must lie in [0, 1)");
  if (!bad.empty()) {
    std::string msg = "SynthSpec invalid:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
}

double pareto_scale(const SynthRelSpec& spec) {
  // Continuous Pareto mean = alpha * x_m / (alpha - 1).
  return spec.mean_degree * (spec.pareto_alpha - 1.0) / spec.pareto_alpha;
}

double pareto_p90(const SynthRelSpec& spec) {
  return pareto_scale(spec) * std::pow(10.0, 1.0 / spec.pareto_alpha);
}

int sample_degree(const SynthRelSpec& spec, int max_degree, Rng& rng) {
  double u = rng.uniform_pos();
  double x = pareto_scale(spec) * std::pow(u, -1.0 / spec.pareto_alpha);
  long long d = std::llround(x);
  if (d < 0) d = 0;
  if (d > max_degree) d = max_degree;
  return static_cast<int>(d);
}

namespace {

std::vector<double> unit_direction(int dim, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  do {
    for (auto& x : v) x = rng.normal();
    norm = l2_norm(v.data(), v.size());
  } while (norm == 0.0);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace

LoadedGraph generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng root(seed);
  int n_types = static_cast<int>(spec.types.size());
  auto type_index = [&](const std::string& name) {
    for (int t = 0; t < n_types; ++t)
      if (spec.types[static_cast<std::size_t>(t)].name == name) return t;
    throw ConfigError("generate_synthetic: unknown type '" + name + "'");
  };
  int primary = type_index(spec.primary);
  int trigger = type_index(spec.trigger);

  // Latent classes for every type, uniform; the primary's double as labels.
  std::vector<std::vector<int>> latent(static_cast<std::size_t>(n_types));
  for (int t = 0; t < n_types; ++t) {
    const auto& ts = spec.types[static_cast<std::size_t>(t)];
    Rng lrng = t == primary ? root.substream("synth.labels")
                            : root.substream("synth.labels." + ts.name);
    auto& ys = latent[static_cast<std::size_t>(t)];
    ys.resize(static_cast<std::size_t>(ts.count));
    for (auto& y : ys) y = lrng.uniform_int(spec.num_classes);
  }
  std::vector<int> labels = latent[static_cast<std::size_t>(primary)];

  // Per-type class means at norm class_signal; non-primary types also get a
  // role mean at norm mean_scale.
  Rng mean_rng = root.substream("synth.means");
  std::vector<std::vector<std::vector<double>>> class_means(static_cast<std::size_t>(n_types));
  std::vector<std::vector<double>> role_means(static_cast<std::size_t>(n_types));
  for (int t = 0; t < n_types; ++t) {
    const auto& ts = spec.types[static_cast<std::size_t>(t)];
    double scale = spec.class_signal * (t == primary ? spec.primary_class_scale : 1.0);
    for (int c = 0; c < spec.num_classes; ++c) {
      auto dir = unit_direction(ts.dim, mean_rng);
      for (auto& x : dir) x *= scale;
      class_means[static_cast<std::size_t>(t)].push_back(std::move(dir));
    }
    if (t == primary) continue;
    auto dir = unit_direction(ts.dim, mean_rng);
    for (auto& x : dir) x *= ts.mean_scale;
    role_means[static_cast<std::size_t>(t)] = std::move(dir);
  }

  std::vector<std::string> type_names;
  std::vector<Tensor> features;
  for (int t = 0; t < n_types; ++t) {
    const auto& ts = spec.types[static_cast<std::size_t>(t)];
    type_names.push_back(ts.name);
    Rng frng = root.substream("synth.features." + ts.name);
    Tensor x(static_cast<std::size_t>(ts.count), static_cast<std::size_t>(ts.dim));
    for (int i = 0; i < ts.count; ++i) {
      int c = latent[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
      const std::vector<double>& cmean =
          class_means[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
      const std::vector<double>& rmean = role_means[static_cast<std::size_t>(t)];
      for (int j = 0; j < ts.dim; ++j) {
        double mu = cmean[static_cast<std::size_t>(j)] +
                    (t == primary ? 0.0 : rmean[static_cast<std::size_t>(j)]);
        x.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
            mu + spec.feature_noise * frng.normal();
      }
    }
    features.push_back(std::move(x));
  }

  std::vector<Relation> relations;
  std::vector<std::vector<std::pair<NodeId, NodeId>>> edges;
  for (const auto& rs : spec.relations) {
    int src = type_index(rs.src);
    int dst = type_index(rs.dst);
    relations.push_back({src, dst});
    Rng erng = root.substream("synth.edges." + rs.src + "->" + rs.dst);
    int n_src = spec.types[static_cast<std::size_t>(src)].count;
    int n_dst = spec.types[static_cast<std::size_t>(dst)].count;
    std::vector<std::vector<NodeId>> by_class(static_cast<std::size_t>(spec.num_classes));
    for (int j = 0; j < n_dst; ++j)
      by_class[static_cast<std::size_t>(latent[static_cast<std::size_t>(dst)]
                                              [static_cast<std::size_t>(j)])]
          .push_back(j);
    std::vector<std::pair<NodeId, NodeId>> es;
    for (int i = 0; i < n_src; ++i) {
      int deg = sample_degree(rs, n_dst, erng);
      const auto& same =
          by_class[static_cast<std::size_t>(latent[static_cast<std::size_t>(src)]
                                                  [static_cast<std::size_t>(i)])];
      std::set<NodeId> chosen;
      for (int e = 0; e < deg; ++e) {
        // Same-class endpoint with probability homophily, uniform otherwise;
        // a handful of retries resolves duplicate draws.
        for (int attempt = 0; attempt < 20; ++attempt) {
          bool in_class = !same.empty() && erng.uniform() < spec.homophily;
          NodeId j = in_class ? same[static_cast<std::size_t>(
                                    erng.uniform_int(static_cast<int>(same.size())))]
                              : erng.uniform_int(n_dst);
          if (chosen.insert(j).second) break;
        }
      }
      for (NodeId j : chosen) es.emplace_back(i, j);
    }
    edges.push_back(std::move(es));
  }

  HeteroGraph g(std::move(type_names), std::move(features), std::move(relations),
                std::move(edges));
  SchemaRoles roles = SchemaRoles::derive(g, primary, trigger, std::move(labels),
                                          spec.num_classes, spec.target_class);
  return {std::move(g), std::move(roles)};
}

AttackTargets split_targets(int n_primary, const std::vector<int>& labels, int target_class,
                            const SplitFractions& f, Rng& rng) {
  if (n_primary < 1) throw ConfigError("split_targets: need at least one primary node");
  if (static_cast<int>(labels.size()) != n_primary)
    throw ConfigError("split_targets: labels length mismatch");
  double sum = f.train + f.test + f.val;
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split_targets: fractions must sum to 1");
  if (f.poison < 0.0 || f.poison > f.train || f.poison > f.test)
    throw ConfigError("split_targets: poison fraction must not exceed train or test");

  std::vector<NodeId> ids(static_cast<std::size_t>(n_primary));
  for (int i = 0; i < n_primary; ++i) ids[static_cast<std::size_t>(i)] = i;
  rng.shuffle(ids);
  std::size_t n_train = static_cast<std::size_t>(f.train * n_primary);
  std::size_t n_test = static_cast<std::size_t>(f.test * n_primary);
  AttackTargets t;
  t.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  t.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_test));
  t.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_test), ids.end());

  auto pick_poison = [&](const std::vector<NodeId>& split) {
    std::vector<NodeId> eligible;
    for (NodeId v : split)
      if (labels[static_cast<std::size_t>(v)] != target_class) eligible.push_back(v);
    std::size_t want = std::max<std::size_t>(
        1, static_cast<std::size_t>(f.poison * static_cast<double>(split.size())));
    if (eligible.empty())
      throw ConfigError("split_targets: no non-target-class node available for poisoning");
    want = std::min(want, eligible.size());
    std::vector<NodeId> out;
    for (int idx : rng.sample_without_replacement(static_cast<int>(eligible.size()),
                                                  static_cast<int>(want)))
      out.push_back(eligible[static_cast<std::size_t>(idx)]);
    std::sort(out.begin(), out.end());
    return out;
  };
  t.poison_train = pick_poison(t.train);
  t.poison_test = pick_poison(t.test);
  return t;
}

GraphDelta naive_inject(const HeteroGraph& g, const SchemaRoles& roles,
                        const std::vector<NodeId>& victims, Rng& rng) {
  if (victims.empty()) throw ConfigError("naive_inject: empty victim list");
  const Tensor& tf = g.features(roles.trigger);
  std::size_t d = tf.cols();
  std::size_t n = tf.rows();
  if (n == 0) throw ConfigError("naive_inject: trigger type has no population to imitate");

  // Shared outlier feature: mean + 10 * (mean per-dim std) along 1/sqrt(d).
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += tf.at(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  double var_sum = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double c = tf.at(i, j) - mean[j];
      acc += c * c;
    }
    var_sum += acc / static_cast<double>(n);
  }
  double sigma_bar = std::sqrt(var_sum / static_cast<double>(d));
  double step = 10.0 * sigma_bar / std::sqrt(static_cast<double>(d));

  GraphDelta delta;
  delta.new_features = Tensor(victims.size(), d);
  for (std::size_t i = 0; i < victims.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) delta.new_features.at(i, j) = mean[j] + step;
  delta.victim_of = victims;

  int base = g.num_nodes(roles.trigger);
  int rel_vf = g.find_relation(roles.primary, roles.trigger);
  int rel_vr = g.find_relation(roles.trigger, roles.primary);
  if (rel_vf < 0 && rel_vr < 0)
    throw SchemaError("naive_inject: no relation joins the primary and trigger types");
  for (std::size_t i = 0; i < victims.size(); ++i) {
    NodeId trig = base + static_cast<NodeId>(i);
    if (rel_vf >= 0)
      delta.new_edges.emplace_back(rel_vf, victims[i], trig);
    else
      delta.new_edges.emplace_back(rel_vr, trig, victims[i]);
    for (TypeId aux : roles.auxiliary) {
      int budget = degree_budget(g, roles, aux);
      int k = std::min(budget, g.num_nodes(aux));
      if (k < 1) continue;
      int rel_f = g.find_relation(roles.trigger, aux);
      int rel_r = g.find_relation(aux, roles.trigger);
      for (int m : rng.sample_without_replacement(g.num_nodes(aux), k)) {
        if (rel_f >= 0)
          delta.new_edges.emplace_back(rel_f, trig, m);
        else
          delta.new_edges.emplace_back(rel_r, m, trig);
      }
    }
  }
  return delta;
}

GraphDelta naive_inject(const HeteroGraph& g, const SchemaRoles& roles, int count, Rng& rng) {
  if (count < 1) throw ConfigError("naive_inject: count must be positive");
  std::vector<NodeId> eligible;
  for (NodeId v = 0; v < g.num_nodes(roles.primary); ++v)
    if (roles.labels[static_cast<std::size_t>(v)] != roles.target_class) eligible.push_back(v);
  if (static_cast<int>(eligible.size()) < count)
    throw ConfigError("naive_inject: fewer eligible victims than requested");
  std::vector<NodeId> victims;
  for (int idx : rng.sample_without_replacement(static_cast<int>(eligible.size()), count))
    victims.push_back(eligible[static_cast<std::size_t>(idx)]);
  std::sort(victims.begin(), victims.end());
  return naive_inject(g, roles, victims, rng);
}

}  // namespace hgl
