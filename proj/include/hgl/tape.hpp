#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hgl/tensor.hpp"

namespace hgl {

// Handle to a tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over 2-D double tensors. Each op appends a node holding
// its value and a backprop closure; backward() runs the closures in reverse.
// Adjoints accumulate (never overwrite), so a variable used twice receives
// both contributions. Every op validates shapes (naming the op on mismatch)
// and faults on non-finite outputs.
class Tape {
 public:
  // Leaf that wants a gradient.
  Var input(const Tensor& v);
  // Leaf excluded from differentiation; backward skips anything that depends
  // only on constants.
  Var constant(const Tensor& v);

  const Tensor& val(Var v) const { return node(v).value; }
  // Zero-shaped gradient until backward touches the node.
  const Tensor& grad(Var v) const;

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // a{n,k} x b{k,m} -> {n,m}
  Var matmul(Var a, Var b);
  // a{n,k} x b{m,k}^T -> {n,m}
  Var matmul_nt(Var a, Var b);
  // Elementwise; b may be {1,c} (row broadcast over a's rows) or {1,1}.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  // Row vectors (or equal-row matrices) side by side.
  Var concat_cols(const std::vector<Var>& parts);
  // Stack rows; all parts share a column count.
  Var concat_rows(const std::vector<Var>& parts);
  Var select_rows(Var a, const std::vector<int>& ids);
  Var select_cols(Var a, std::size_t offset, std::size_t len);
  Var reshape(Var a, std::size_t rows, std::size_t cols);
  Var sum_all(Var a);       // -> {1,1}
  Var mean_all(Var a);      // -> {1,1}
  Var mean_rows(Var a);     // per-column mean over rows -> {1,c}
  Var sqrt_op(Var a);       // elementwise; negative input faults
  Var gelu(Var a);          // exact Gaussian-CDF form
  Var sigmoid(Var a);
  Var relu(Var a);
  Var layer_norm(Var a, double eps = 1e-5);      // per row, no affine
  Var l2_normalize(Var a, double eps = 1e-12);   // per row; zero row faults
  Var softmax(Var a);                            // per row
  // Sum over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, const std::vector<int>& labels);
  // H{n_src,d}, per-destination neighbor lists -> {n_dst,d}; an empty list
  // yields a zero row.
  Var mean_over_neighbors(Var h, std::shared_ptr<const std::vector<std::vector<int>>> nbrs);
  // H{n,d}, w{1,n} -> {1,d}: sum_i w_i * H_i.
  Var rows_weighted_sum(Var h, Var w);
  // K[i,j] = mean over gammas of exp(-||x_i - y_j||^2 / (2 gamma^2)).
  Var gaussian_rbf(Var x, Var y, const std::vector<double>& gammas);

  // Escape hatch for ops with bespoke backward rules (straight-through
  // selections). The closure receives the upstream gradient and must
  // accumulate into the inputs' grads via accumulate_grad().
  Var make_node(Tensor value, std::vector<Var> inputs,
                std::function<void(Tape&, const Tensor&)> backprop,
                const char* op_name);

  void accumulate_grad(Var v, const Tensor& g);

  // Seed d(loss)=1 and sweep. loss must be {1,1}.
  void backward(Var loss);
  // Seed an arbitrary node with an explicit cotangent and sweep from it.
  void backward_from(Var v, const Tensor& seed);
  void zero_grads();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_touched = false;
    bool requires_grad = false;
    std::vector<int> inputs;
    std::function<void(Tape&, const Tensor&)> backprop;
    const char* op_name = "";
  };

  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ShapeError("Tape: invalid Var handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ShapeError("Tape: invalid Var handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push(Tensor value, std::vector<Var> inputs,
           std::function<void(Tape&, const Tensor&)> backprop, const char* op_name);

  std::vector<Node> nodes_;
  Tensor empty_grad_;
};

// AdamW with decoupled weight decay and global-norm gradient clipping.
struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}
  const OptimizerConfig& config() const { return cfg_; }
  // One update over a parameter group. Gradient order must match parameter
  // order and stay stable across calls. Non-finite gradients fault.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);
  int steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Max over coordinates of |analytic - central difference| / max(1, |numeric|).
// build must map (tape, input var) to a {1,1} loss.
double grad_check(const std::function<Var(Tape&, Var)>& build, const Tensor& point,
                  double step);

}  // namespace hgl
