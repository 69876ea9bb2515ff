#pragma once

#include <string>
#include <vector>

#include "hgl/graph.hpp"
#include "hgl/rng.hpp"
#include "hgl/tape.hpp"
#include "hgl/tensor.hpp"

namespace hgl {

// Relational message-passing classifier over a typed graph. Every relation
// contributes two directed message channels (along the relation and against
// it), each with its own weight matrix per layer, so information reaches both
// endpoint types. Per layer and type:
//   h' = gelu(layer_norm(W_self h + sum_channels W_c * mean_{neighbors} h))
// with a zero aggregate for empty neighborhoods. Inputs enter through
// per-type linear projections; a linear head on the primary type emits
// class logits.
struct ClassifierConfig {
  int hidden = 32;
  int layers = 2;
};

struct RelationalClassifier {
  ClassifierConfig cfg;
  int num_classes = 0;
  std::vector<int> input_dims;            // per type
  std::vector<Relation> relations;        // copied from the schema at init
  TypeId primary = -1;

  std::vector<Tensor> proj_w, proj_b;     // per type: {h, d_t}, {1, h}
  std::vector<Tensor> self_w;             // per layer: {h, h}
  std::vector<std::vector<Tensor>> chan_w;  // [layer][2*rel + dir]: {h, h}
  Tensor head_w, head_b;                  // {C, h}, {1, C}

  static RelationalClassifier init(const HeteroGraph& g, const SchemaRoles& roles,
                                   ClassifierConfig cfg, Rng& rng);

  // Stable flat parameter views (order matches between both).
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  std::vector<std::string> param_names() const;

  bool matches_schema(const HeteroGraph& g) const;
};

// Non-tape forward: all hidden layers plus primary-type logits.
struct ForwardActivations {
  std::vector<std::vector<Tensor>> hidden;  // [layer 0..L][type]
  Tensor logits;                            // {n_primary, C}
};
ForwardActivations forward_activations(const RelationalClassifier& m, const HeteroGraph& g);
Tensor forward_logits(const RelationalClassifier& m, const HeteroGraph& g);

// Argmax class per primary node; ties resolve to the lowest class id.
std::vector<int> predict(const RelationalClassifier& m, const HeteroGraph& g);
int argmax_class(const double* row, int classes);

double accuracy(const RelationalClassifier& m, const HeteroGraph& g,
                const std::vector<NodeId>& nodes, const std::vector<int>& labels);

// Tape forward with selectable leaf roles.
struct TapeForwardOptions {
  bool params_as_inputs = false;
  bool features_as_inputs = false;
};
struct TapeForward {
  std::vector<Var> param_vars;    // aligned with params() order (empty unless requested)
  std::vector<Var> feature_vars;  // per type (empty unless requested)
  Var logits;
};
TapeForward build_forward(Tape& tape, const RelationalClassifier& m, const HeteroGraph& g,
                          const TapeForwardOptions& opt);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainConfig {
  int epochs = 150;
  OptimizerConfig optimizer;
};

struct TrainResult {
  RelationalClassifier model;   // parameters of the best-validation epoch
  std::vector<EpochStats> trace;
  double best_val_acc = 0.0;
  int best_epoch = -1;
};

// Full-batch AdamW on summed cross-entropy over the train nodes; keeps the
// parameters from the epoch with the highest validation accuracy (earliest on
// ties).
TrainResult train_clean(const RelationalClassifier& init, const HeteroGraph& g,
                        const std::vector<int>& labels, const std::vector<NodeId>& train,
                        const std::vector<NodeId>& val, const TrainConfig& cfg);

// d logits[node, cls] / d features, one tensor per node type.
std::vector<Tensor> input_gradient(const RelationalClassifier& m, const HeteroGraph& g,
                                   NodeId node, int cls);

void save_classifier_json(const std::string& path, const RelationalClassifier& m);
RelationalClassifier load_classifier_json(const std::string& path);

}  // namespace hgl
