#include "hgl/defense.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <tuple>

#include <json.hpp>

#include "hgl/errors.hpp"
#include "hgl/tape.hpp"

namespace hgl {

void validate(const DefenseConfig& cfg) {
  std::vector<std::string> bad;
  if (cfg.tau_r <= 0.0) bad.push_back("tau_r must be positive");
  if (cfg.pca_dim < 1) bad.push_back("pca_dim must be positive");
  if (cfg.knn_k < 1) bad.push_back("knn_k must be positive");
  if (cfg.knn_k % 2 == 0) bad.push_back("knn_k must be odd");
  if (cfg.prune_fraction < 0.0 || cfg.prune_fraction > 0.5)
    bad.push_back("prune_fraction must lie in [0, 0.5]");
  if (cfg.od_fraction < 0.0 || cfg.od_fraction > 0.5)
    bad.push_back("od_fraction must lie in [0, 0.5]");
  if (cfg.od_hidden < 1) bad.push_back("od_hidden must be positive");
  if (cfg.od_epochs < 1) bad.push_back("od_epochs must be positive");
  if (!bad.empty()) {
    std::string msg = "DefenseConfig invalid:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
}

double separation_ratio(const Tensor& mu1, const Tensor& mu2, double sigma1, double sigma2) {
  if (!mu1.same_shape(mu2))
    throw ShapeError("separation_ratio: centroid shapes differ, " + mu1.shape_str() + " vs " +
                     mu2.shape_str());
  if (sigma1 < 0.0 || sigma2 < 0.0)
    throw ConfigError("separation_ratio: radii must be non-negative");
  double num = std::sqrt(sq_dist(mu1.data.data(), mu2.data.data(), mu1.numel()));
  if (num == 0.0) return 0.0;
  double den = sigma1 + sigma2;
  if (den == 0.0) return std::numeric_limits<double>::infinity();
  return num / den;
}

namespace {

// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
// Returns eigenvalues (diagonal of the rotated matrix) and accumulates the
// rotations into eigenvector columns.
void jacobi_eigen(Tensor& a, Tensor& vecs) {
  std::size_t d = a.rows();
  vecs = Tensor::identity(d);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) off += a.at(i, j) * a.at(i, j);
    if (off <= 1e-24) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        double apq = a.at(p, q);
        if (apq == 0.0) continue;
        double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          double vkp = vecs.at(k, p), vkq = vecs.at(k, q);
          vecs.at(k, p) = c * vkp - s * vkq;
          vecs.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
}

}  // namespace

Tensor pca_project(const Tensor& x, int latent_dim) {
  if (latent_dim < 1) throw ConfigError("pca_project: latent_dim must be positive");
  std::size_t n = x.rows(), d = x.cols();
  std::size_t latent = std::min<std::size_t>(static_cast<std::size_t>(latent_dim), d);
  Tensor out(n, latent);
  if (n == 0) return out;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x.at(i, j);
  for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
  Tensor centered(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered.at(i, j) = x.at(i, j) - mean[j];
  Tensor cov(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += centered.at(i, a) * centered.at(i, b);
      s /= static_cast<double>(n);
      cov.at(a, b) = s;
      cov.at(b, a) = s;
    }
  Tensor vecs;
  jacobi_eigen(cov, vecs);
  std::vector<std::size_t> order(d);
  for (std::size_t j = 0; j < d; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cov.at(a, a) > cov.at(b, b); });
  // Sign canonicalization: flip each direction so its largest-magnitude entry
  // is positive (ties toward the earlier row).
  for (std::size_t c = 0; c < latent; ++c) {
    std::size_t col = order[c];
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t k = 0; k < d; ++k)
      if (std::abs(vecs.at(k, col)) > best) {
        best = std::abs(vecs.at(k, col));
        arg = k;
      }
    double flip = vecs.at(arg, col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += centered.at(i, k) * vecs.at(k, col);
      out.at(i, c) = flip * s;
    }
  }
  return out;
}

namespace {

double row_sq_dist(const Tensor& x, std::size_t i, const double* c) {
  return sq_dist(x.row_ptr(i), c, x.cols());
}

// One k-means++ seeded Lloyd run; returns the within-cluster sum of squared
// distances and fills `assign`.
double lloyd_once(const Tensor& x, Rng& rng, std::vector<int>& assign) {
  std::size_t n = x.rows(), d = x.cols();
  std::vector<double> c0(d), c1(d);
  std::size_t first = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n)));
  for (std::size_t j = 0; j < d; ++j) c0[j] = x.at(first, j);
  // Second seed proportional to squared distance from the first.
  std::vector<double> w(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = row_sq_dist(x, i, c0.data());
    total += w[i];
  }
  std::size_t second;
  if (total <= 0.0) {
    second = first == 0 ? (n > 1 ? 1 : 0) : 0;
  } else {
    double r = rng.uniform() * total;
    double acc = 0.0;
    second = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += w[i];
      if (r < acc) {
        second = i;
        break;
      }
    }
  }
  for (std::size_t j = 0; j < d; ++j) c1[j] = x.at(second, j);

  assign.assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      double d0 = row_sq_dist(x, i, c0.data());
      double d1 = row_sq_dist(x, i, c1.data());
      int a = d1 < d0 ? 1 : 0;  // tie -> cluster 0
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    // Empty-cluster repair: move the point farthest from its centroid.
    std::size_t n0 = static_cast<std::size_t>(std::count(assign.begin(), assign.end(), 0));
    if (n0 == 0 || n0 == n) {
      const std::vector<double>& full = n0 == 0 ? c1 : c0;
      std::size_t far = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        double di = row_sq_dist(x, i, full.data());
        if (di > best) {
          best = di;
          far = i;
        }
      }
      assign[far] = n0 == 0 ? 0 : 1;
      changed = true;
    }
    std::fill(c0.begin(), c0.end(), 0.0);
    std::fill(c1.begin(), c1.end(), 0.0);
    std::size_t cnt0 = 0, cnt1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double>& c = assign[i] == 0 ? c0 : c1;
      (assign[i] == 0 ? cnt0 : cnt1) += 1;
      for (std::size_t j = 0; j < d; ++j) c[j] += x.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) {
      c0[j] /= static_cast<double>(cnt0);
      c1[j] /= static_cast<double>(cnt1);
    }
    if (!changed) break;
  }
  double obj = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    obj += row_sq_dist(x, i, assign[i] == 0 ? c0.data() : c1.data());
  return obj;
}

}  // namespace

std::vector<int> two_means(const Tensor& x, int restarts, Rng& rng) {
  if (x.rows() < 2) throw ConfigError("two_means: need at least 2 rows");
  if (restarts < 1) throw ConfigError("two_means: restarts must be positive");
  std::vector<int> best_assign, assign;
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    double obj = lloyd_once(x, rng, assign);
    if (obj < best) {
      best = obj;
      best_assign = assign;
    }
  }
  return best_assign;
}

ClusterSummary summarize_clusters(const Tensor& x, const std::vector<int>& assign) {
  if (assign.size() != x.rows())
    throw ShapeError("summarize_clusters: assignment length mismatch");
  ClusterSummary s;
  s.centroid1 = Tensor(1, x.cols());
  s.centroid2 = Tensor(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (assign[i] == 0)
      s.members1.push_back(static_cast<int>(i));
    else
      s.members2.push_back(static_cast<int>(i));
  }
  if (s.members1.empty() || s.members2.empty())
    throw NumericFault("summarize_clusters: empty cluster");
  auto fill = [&](const std::vector<int>& members, Tensor& mu, double& sigma) {
    for (int i : members)
      for (std::size_t j = 0; j < x.cols(); ++j)
        mu.at(0, j) += x.at(static_cast<std::size_t>(i), j);
    for (std::size_t j = 0; j < x.cols(); ++j) mu.at(0, j) /= static_cast<double>(members.size());
    double acc = 0.0;
    for (int i : members) acc += row_sq_dist(x, static_cast<std::size_t>(i), mu.data.data());
    sigma = std::sqrt(acc / static_cast<double>(members.size()));
  };
  fill(s.members1, s.centroid1, s.sigma1);
  fill(s.members2, s.centroid2, s.sigma2);
  s.ratio = separation_ratio(s.centroid1, s.centroid2, s.sigma1, s.sigma2);
  return s;
}

int knn_label(const Tensor& feats, NodeId v, const std::vector<NodeId>& candidates,
              const std::vector<int>& labels, int k, int num_classes) {
  if (candidates.empty()) throw ConfigError("knn_label: no candidates");
  if (k < 1) throw ConfigError("knn_label: k must be positive");
  std::vector<std::pair<double, NodeId>> by_dist;
  by_dist.reserve(candidates.size());
  for (NodeId c : candidates) {
    double d = sq_dist(feats.row_ptr(static_cast<std::size_t>(v)),
                       feats.row_ptr(static_cast<std::size_t>(c)), feats.cols());
    by_dist.emplace_back(d, c);
  }
  std::sort(by_dist.begin(), by_dist.end());
  std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), by_dist.size());
  std::vector<int> votes(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < take; ++i) {
    int lab = labels.at(static_cast<std::size_t>(by_dist[i].second));
    if (lab < 0 || lab >= num_classes)
      throw ConfigError("knn_label: label out of range for node " +
                        std::to_string(by_dist[i].second));
    votes[static_cast<std::size_t>(lab)] += 1;
  }
  int best = 0;
  for (int c = 1; c < num_classes; ++c)
    if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)]) best = c;
  return best;
}

DefenseOutcome csd_defend(const HeteroGraph& g, const std::vector<int>& labels,
                          const SchemaRoles& roles, const DefenseConfig& cfg) {
  validate(cfg);
  if (static_cast<int>(labels.size()) != g.num_nodes(roles.primary))
    throw ConfigError("csd_defend: labels length must match the primary type");
  Rng root(cfg.seed);
  DefenseOutcome out{g, labels, {}};
  std::vector<std::vector<NodeId>> suspicious_per_type(static_cast<std::size_t>(g.num_types()));

  for (TypeId t = 0; t < g.num_types(); ++t) {
    TypeDefenseReport tr;
    tr.type = g.type_name(t);
    int n = g.num_nodes(t);
    if (n < 2) {
      tr.skipped = true;
      tr.note = "fewer than 2 nodes";
      out.report.per_type.push_back(std::move(tr));
      continue;
    }
    Tensor latent = pca_project(g.features(t), cfg.pca_dim);
    Rng stream = root.substream("defense.csd." + g.type_name(t));
    std::vector<int> assign = two_means(latent, 50, stream);
    ClusterSummary cs = summarize_clusters(latent, assign);
    tr.ratio = cs.ratio;
    if (cs.ratio > cfg.tau_r) {
      const std::vector<int>* smaller;
      if (cs.members1.size() != cs.members2.size()) {
        smaller = cs.members1.size() < cs.members2.size() ? &cs.members1 : &cs.members2;
      } else {
        // Size tie: suspicious is the cluster whose centroid lies farther
        // from the type's overall latent centroid.
        Tensor global(1, latent.cols());
        for (std::size_t i = 0; i < latent.rows(); ++i)
          for (std::size_t j = 0; j < latent.cols(); ++j) global.at(0, j) += latent.at(i, j);
        for (std::size_t j = 0; j < latent.cols(); ++j)
          global.at(0, j) /= static_cast<double>(latent.rows());
        double d1 = sq_dist(cs.centroid1.data.data(), global.data.data(), latent.cols());
        double d2 = sq_dist(cs.centroid2.data.data(), global.data.data(), latent.cols());
        smaller = d1 >= d2 ? &cs.members1 : &cs.members2;
      }
      for (int m : *smaller) suspicious_per_type[static_cast<std::size_t>(t)].push_back(m);
      tr.suspicious = suspicious_per_type[static_cast<std::size_t>(t)];
      tr.suspicious_count = static_cast<int>(tr.suspicious.size());
    }
    out.report.per_type.push_back(std::move(tr));
  }

  // Victims: primary nodes adjacent to any suspicious node, collected before
  // pruning so adjacency reflects the poisoned graph.
  std::set<NodeId> victims;
  for (TypeId t = 0; t < g.num_types(); ++t) {
    const auto& susp = suspicious_per_type[static_cast<std::size_t>(t)];
    if (susp.empty()) continue;
    for (int r = 0; r < g.num_relations(); ++r) {
      const Relation& rel = g.relation(r);
      if (rel.src == t && rel.dst == roles.primary)
        for (NodeId s : susp)
          for (NodeId p : g.out_neighbors(r, s)) victims.insert(p);
      if (rel.dst == t && rel.src == roles.primary)
        for (NodeId s : susp)
          for (NodeId p : g.in_neighbors(r, s)) victims.insert(p);
    }
  }

  for (TypeId t = 0; t < g.num_types(); ++t) {
    const auto& susp = suspicious_per_type[static_cast<std::size_t>(t)];
    if (susp.empty()) continue;
    std::size_t before = out.graph.num_edges();
    out.graph = out.graph.without_incident_edges(t, susp);
    int removed = static_cast<int>(before - out.graph.num_edges());
    out.report.per_type[static_cast<std::size_t>(t)].pruned_edges = removed;
    out.report.total_pruned_edges += removed;
  }

  if (!victims.empty()) {
    const auto& prim_susp = suspicious_per_type[static_cast<std::size_t>(roles.primary)];
    std::set<NodeId> prim_susp_set(prim_susp.begin(), prim_susp.end());
    std::vector<NodeId> candidates;
    for (NodeId p = 0; p < g.num_nodes(roles.primary); ++p)
      if (!prim_susp_set.count(p)) candidates.push_back(p);
    const Tensor& feats = g.features(roles.primary);
    for (NodeId v : victims) {
      std::vector<NodeId> cands;
      cands.reserve(candidates.size());
      for (NodeId c : candidates)
        if (c != v) cands.push_back(c);
      if (cands.empty()) {
        out.report.notes.push_back("no rectification candidates for node " + std::to_string(v));
        continue;
      }
      RectifiedLabel rl;
      rl.node = v;
      rl.old_label = labels[static_cast<std::size_t>(v)];
      rl.new_label = knn_label(feats, v, cands, labels, cfg.knn_k, roles.num_classes);
      out.labels[static_cast<std::size_t>(v)] = rl.new_label;
      out.report.rectified.push_back(rl);
    }
  }
  return out;
}

PruneOutcome prune_defense(const HeteroGraph& g, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 0.5)
    throw ConfigError("prune_defense: fraction must lie in [0, 0.5]");
  PruneOutcome out{g, {}};
  std::size_t total = g.num_edges();
  std::size_t remove_n = static_cast<std::size_t>(fraction * static_cast<double>(total));
  int width = std::numeric_limits<int>::max();
  for (TypeId t = 0; t < g.num_types(); ++t) width = std::min(width, g.feature_dim(t));
  out.report.projection_width = width;
  if (remove_n == 0) return out;

  // Shared seeded projections: one Gaussian matrix per type, drawn in type
  // order from a single stream, mapping every type into the common width.
  Rng stream = Rng(seed).substream("defense.prune");
  std::vector<Tensor> projected(static_cast<std::size_t>(g.num_types()));
  for (TypeId t = 0; t < g.num_types(); ++t) {
    int d = g.feature_dim(t);
    Tensor p(static_cast<std::size_t>(d), static_cast<std::size_t>(width));
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& v : p.data) v = stream.normal() * scale;
    const Tensor& x = g.features(t);
    Tensor px(x.rows(), static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (int j = 0; j < width; ++j) {
        double s = 0.0;
        for (int k = 0; k < d; ++k)
          s += x.at(i, static_cast<std::size_t>(k)) *
               p.at(static_cast<std::size_t>(k), static_cast<std::size_t>(j));
        px.at(i, static_cast<std::size_t>(j)) = s;
      }
    projected[static_cast<std::size_t>(t)] = std::move(px);
  }

  struct Scored {
    double sim;
    std::size_t order;
    int rel;
    NodeId src, dst;
  };
  std::vector<Scored> scored;
  scored.reserve(total);
  std::size_t order = 0;
  for (int r = 0; r < g.num_relations(); ++r) {
    const Relation& rel = g.relation(r);
    const Tensor& ps = projected[static_cast<std::size_t>(rel.src)];
    const Tensor& pd = projected[static_cast<std::size_t>(rel.dst)];
    for (const auto& [u, v] : g.edge_list(r)) {
      const double* a = ps.row_ptr(static_cast<std::size_t>(u));
      const double* b = pd.row_ptr(static_cast<std::size_t>(v));
      double na = l2_norm(a, static_cast<std::size_t>(width));
      double nb = l2_norm(b, static_cast<std::size_t>(width));
      double sim = (na == 0.0 || nb == 0.0)
                       ? 0.0
                       : dot(a, b, static_cast<std::size_t>(width)) / (na * nb);
      scored.push_back({sim, order++, r, u, v});
    }
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim < b.sim;
    return a.order < b.order;
  });
  for (std::size_t i = 0; i < remove_n; ++i)
    out.report.removed.emplace_back(scored[i].rel, scored[i].src, scored[i].dst);
  out.graph = g.without_edges(out.report.removed);
  return out;
}

OdOutcome od_defense(const HeteroGraph& g, const DefenseConfig& cfg) {
  validate(cfg);
  OdOutcome out{g, {}};
  Rng root(cfg.seed);
  for (TypeId t = 0; t < g.num_types(); ++t) {
    OdTypeReport tr;
    tr.type = g.type_name(t);
    int n = g.num_nodes(t);
    int d = g.feature_dim(t);
    if (n < cfg.od_hidden) {
      tr.skipped = true;
      tr.note = "fewer nodes than the hidden width";
      out.per_type.push_back(std::move(tr));
      continue;
    }
    std::size_t drop_n =
        static_cast<std::size_t>(cfg.od_fraction * static_cast<double>(n));
    if (drop_n == 0) {
      tr.note = "drop fraction rounds to zero";
      out.per_type.push_back(std::move(tr));
      continue;
    }
    // One-hidden-layer linear autoencoder trained on this type's features.
    Rng stream = root.substream("defense.od." + g.type_name(t));
    std::size_t h = static_cast<std::size_t>(cfg.od_hidden);
    std::size_t du = static_cast<std::size_t>(d);
    Tensor w1(h, du), b1(1, h), w2(du, h), b2(1, du);
    double s1 = std::sqrt(2.0 / static_cast<double>(h + du));
    for (auto& v : w1.data) v = stream.normal() * s1;
    for (auto& v : w2.data) v = stream.normal() * s1;
    OptimizerConfig oc;
    oc.lr = 1e-2;
    AdamW opt(oc);
    std::vector<Tensor*> params = {&w1, &b1, &w2, &b2};
    for (int epoch = 0; epoch < cfg.od_epochs; ++epoch) {
      Tape tape;
      Var x = tape.constant(g.features(t));
      Var vw1 = tape.input(w1), vb1 = tape.input(b1);
      Var vw2 = tape.input(w2), vb2 = tape.input(b2);
      Var hid = tape.add(tape.matmul_nt(x, vw1), vb1);
      Var rec = tape.add(tape.matmul_nt(hid, vw2), vb2);
      Var diff = tape.sub(rec, x);
      Var loss = tape.mean_all(tape.mul(diff, diff));
      tape.backward(loss);
      std::vector<const Tensor*> grads = {&tape.grad(vw1), &tape.grad(vb1), &tape.grad(vw2),
                                          &tape.grad(vb2)};
      opt.step(params, grads);
    }
    // Per-node reconstruction MSE with the trained weights.
    Tape tape;
    Var x = tape.constant(g.features(t));
    Var rec = tape.add(
        tape.matmul_nt(tape.add(tape.matmul_nt(x, tape.constant(w1)), tape.constant(b1)),
                       tape.constant(w2)),
        tape.constant(b2));
    const Tensor& xr = g.features(t);
    const Tensor& rr = tape.val(rec);
    std::vector<std::pair<double, NodeId>> ranked;
    ranked.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      double mse = sq_dist(xr.row_ptr(static_cast<std::size_t>(i)),
                           rr.row_ptr(static_cast<std::size_t>(i)), du) /
                   static_cast<double>(du);
      ranked.emplace_back(mse, i);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t i = 0; i < drop_n; ++i) {
      tr.dropped.push_back(ranked[i].second);
      tr.errors.push_back(ranked[i].first);
    }
    out.graph = out.graph.without_incident_edges(t, tr.dropped);
    out.per_type.push_back(std::move(tr));
  }
  return out;
}

void save_defense_report_json(const std::string& path, const DefenseReport& report) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "defense_report";
  j["total_pruned_edges"] = report.total_pruned_edges;
  j["per_type"] = nlohmann::ordered_json::array();
  for (const auto& tr : report.per_type) {
    nlohmann::ordered_json e;
    e["type"] = tr.type;
    e["skipped"] = tr.skipped;
    if (!tr.note.empty()) e["note"] = tr.note;
    e["separation_ratio"] = tr.ratio;
    e["suspicious_count"] = tr.suspicious_count;
    e["suspicious"] = tr.suspicious;
    e["pruned_edges"] = tr.pruned_edges;
    j["per_type"].push_back(std::move(e));
  }
  j["rectified"] = nlohmann::ordered_json::array();
  for (const auto& rl : report.rectified) {
    nlohmann::ordered_json e;
    e["node"] = rl.node;
    e["old_label"] = rl.old_label;
    e["new_label"] = rl.new_label;
    j["rectified"].push_back(std::move(e));
  }
  j["notes"] = report.notes;
  std::ofstream f(path);
  if (!f) throw ConfigError("save_defense_report_json: cannot open '" + path + "'");
  f << j.dump(1) << '\n';
}

}  // namespace hgl
