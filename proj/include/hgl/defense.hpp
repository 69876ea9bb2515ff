#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hgl/graph.hpp"
#include "hgl/rng.hpp"
#include "hgl/tensor.hpp"

namespace hgl {

struct DefenseConfig {
  double tau_r = 2.0;           // separation-ratio threshold for flagging a type
  int pca_dim = 8;              // PCA latent dimension for clustering
  int knn_k = 5;                // neighbor count for label rectification (odd)
  double prune_fraction = 0.1;  // fraction of least-similar edges removed
  double od_fraction = 0.1;     // fraction of highest-error nodes isolated
  int od_hidden = 8;            // autoencoder hidden width
  int od_epochs = 200;          // autoencoder training steps (full batch)
  std::uint64_t seed = 1;       // root of the defense randomness substreams
};

// Throws ConfigError listing every violated bound.
void validate(const DefenseConfig& cfg);

// Centroid distance over summed RMS radii. A zero numerator wins (-> 0); a
// zero denominator with distinct centroids -> +infinity.
double separation_ratio(const Tensor& mu1, const Tensor& mu2, double sigma1, double sigma2);

// Project x {n, d} onto its top min(latent_dim, d) principal directions
// (centered; covariance eigenvectors via cyclic Jacobi sweeps; each direction
// sign-canonicalized so its largest-magnitude entry is positive).
Tensor pca_project(const Tensor& x, int latent_dim);

// 2-means over the rows of x: k-means++ seeding, `restarts` restarts, Lloyd
// iterations until assignments stabilize; the lowest within-cluster sum of
// squared distances wins (first seen kept on ties). Returns 0/1 per row.
// Requires >= 2 rows.
std::vector<int> two_means(const Tensor& x, int restarts, Rng& rng);

struct ClusterSummary {
  Tensor centroid1, centroid2;             // {1, d}
  double sigma1 = 0.0, sigma2 = 0.0;       // RMS radii
  std::vector<int> members1, members2;     // row indices
  double ratio = 0.0;                      // separation ratio
};

// Centroids, RMS radii, and separation ratio for a 0/1 assignment over the
// rows of x. Throws NumericFault if either cluster is empty.
ClusterSummary summarize_clusters(const Tensor& x, const std::vector<int>& assign);

// Majority label of the k nearest candidates to row v of feats (Euclidean;
// distance ties broken by lower id). Fewer than k candidates -> all are used.
// Vote ties -> lowest class id. Throws ConfigError when candidates is empty.
int knn_label(const Tensor& feats, NodeId v, const std::vector<NodeId>& candidates,
              const std::vector<int>& labels, int k, int num_classes);

struct TypeDefenseReport {
  std::string type;
  bool skipped = false;
  std::string note;
  double ratio = 0.0;
  int suspicious_count = 0;
  std::vector<NodeId> suspicious;
  // Edges removed while isolating this type's suspicious nodes (types are
  // processed in id order, so an edge suspicious at both ends counts for the
  // earlier type).
  int pruned_edges = 0;
};

struct RectifiedLabel {
  NodeId node = -1;
  int old_label = -1;
  int new_label = -1;
};

struct DefenseReport {
  std::vector<TypeDefenseReport> per_type;
  std::vector<RectifiedLabel> rectified;  // every victim, even if the vote kept its label
  int total_pruned_edges = 0;
  std::vector<std::string> notes;
};

struct DefenseOutcome {
  HeteroGraph graph;
  std::vector<int> labels;  // primary labels after rectification
  DefenseReport report;
};

// Cluster-based structural defense: per node type, PCA + 2-means; when the
// separation ratio exceeds cfg.tau_r the smaller cluster (size tie -> the one
// whose centroid sits farther from the type's latent centroid) is marked
// suspicious and isolated; primary nodes adjacent to suspicious nodes get
// their labels re-voted from the k nearest non-suspicious primary nodes using
// the *input* labels. Never adds nodes or edges.
DefenseOutcome csd_defend(const HeteroGraph& g, const std::vector<int>& labels,
                          const SchemaRoles& roles, const DefenseConfig& cfg);

struct PruneReport {
  std::vector<std::tuple<int, NodeId, NodeId>> removed;  // (relation, src, dst)
  int projection_width = 0;
  std::vector<std::string> notes;
};

struct PruneOutcome {
  HeteroGraph graph;
  PruneReport report;
};

// Remove the floor(fraction * |E|) globally least cosine-similar edges, with
// endpoint features mapped into a common width (the smallest feature dim)
// through per-type seeded Gaussian random projections. Similarity ties break
// toward the earlier edge in (relation, src, dst) enumeration order.
PruneOutcome prune_defense(const HeteroGraph& g, double fraction, std::uint64_t seed);

struct OdTypeReport {
  std::string type;
  bool skipped = false;
  std::string note;
  std::vector<NodeId> dropped;
  std::vector<double> errors;  // reconstruction MSE of the dropped nodes
};

struct OdOutcome {
  HeteroGraph graph;
  std::vector<OdTypeReport> per_type;
};

// Per type, train a one-hidden-layer linear autoencoder on the type's
// features and isolate the floor(od_fraction * n) nodes with the highest
// reconstruction error (ties -> lower id). Types with fewer nodes than the
// hidden width are skipped with a note. Node ids are dense, so "discarding" a
// node removes its incident edges.
OdOutcome od_defense(const HeteroGraph& g, const DefenseConfig& cfg);

// Report serialization (JSON).
void save_defense_report_json(const std::string& path, const DefenseReport& report);

}  // namespace hgl
