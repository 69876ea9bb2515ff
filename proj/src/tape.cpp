#include "hgl/tape.hpp"

#include <algorithm>
#include <cmath>

namespace hgl {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// C{n,m} += A{n,k} B{k,m}
void mm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = c.row_ptr(i);
    for (std::size_t l = 0; l < k; ++l) {
      double av = ai[l];
      if (av == 0.0) continue;
      const double* bl = b.row_ptr(l);
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bl[j];
    }
  }
}

// C{n,m} += A{n,k} B{m,k}^T
void mm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = c.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) ci[j] += dot(ai, b.row_ptr(j), k);
  }
}

// C{n,m} += A{k,n}^T B{k,m}
void mm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  for (std::size_t l = 0; l < k; ++l) {
    const double* al = a.row_ptr(l);
    const double* bl = b.row_ptr(l);
    for (std::size_t i = 0; i < n; ++i) {
      double av = al[i];
      if (av == 0.0) continue;
      double* ci = c.row_ptr(i);
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bl[j];
    }
  }
}

}  // namespace

Var Tape::push(Tensor value, std::vector<Var> inputs,
               std::function<void(Tape&, const Tensor&)> backprop, const char* op_name) {
  if (!value.all_finite())
    throw NumericFault(std::string(op_name) + ": non-finite output");
  Node n;
  n.value = std::move(value);
  n.op_name = op_name;
  bool any = false;
  for (Var in : inputs) {
    if (node(in).requires_grad) any = true;
    n.inputs.push_back(in.id);
  }
  n.requires_grad = any;
  if (any) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(const Tensor& v) {
  if (!v.all_finite()) throw NumericFault("input: non-finite leaf");
  Node n;
  n.value = v;
  n.requires_grad = true;
  n.op_name = "input";
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(const Tensor& v) {
  if (!v.all_finite()) throw NumericFault("constant: non-finite leaf");
  Node n;
  n.value = v;
  n.requires_grad = false;
  n.op_name = "constant";
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grad_touched) {
    // Untouched: report a zero gradient of the right shape.
    const_cast<Node&>(n).grad = Tensor(n.value.rows(), n.value.cols());
    const_cast<Node&>(n).grad_touched = true;
  }
  return n.grad;
}

void Tape::accumulate_grad(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (!n.grad_touched || n.grad.numel() == 0) {
    n.grad = Tensor(n.value.rows(), n.value.cols());
    n.grad_touched = true;
  }
  if (!n.grad.same_shape(g))
    throw ShapeError(std::string("accumulate_grad: cotangent shape ") + g.shape_str() +
                     " vs value " + n.value.shape_str());
  for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

void Tape::zero_grads() {
  for (Node& n : nodes_) {
    n.grad_touched = false;
    std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  }
}

void Tape::backward(Var loss) {
  const Node& n = node(loss);
  if (n.value.rows() != 1 || n.value.cols() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + n.value.shape_str());
  backward_from(loss, Tensor::scalar(1.0));
}

void Tape::backward_from(Var v, const Tensor& seed) {
  Node& start = node(v);
  if (!start.value.same_shape(seed))
    throw ShapeError("backward_from: seed shape " + seed.shape_str() + " vs value " +
                     start.value.shape_str());
  if (!start.requires_grad) return;
  accumulate_grad(v, seed);
  for (int id = v.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_touched || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
}

Var Tape::make_node(Tensor value, std::vector<Var> inputs,
                    std::function<void(Tape&, const Tensor&)> backprop, const char* op_name) {
  return push(std::move(value), std::move(inputs), std::move(backprop), op_name);
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: " + av.shape_str() + " x " + bv.shape_str());
  Tensor out(av.rows(), bv.cols());
  mm_nn(av, bv, out);
  return push(std::move(out), {a, b},
              [a, b](Tape& t, const Tensor& g) {
                if (t.requires_grad(a)) {
                  Tensor da(t.val(a).rows(), t.val(a).cols());
                  mm_nt(g, t.val(b), da);  // G B^T
                  t.accumulate_grad(a, da);
                }
                if (t.requires_grad(b)) {
                  Tensor db(t.val(b).rows(), t.val(b).cols());
                  mm_tn(t.val(a), g, db);  // A^T G
                  t.accumulate_grad(b, db);
                }
              },
              "matmul");
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (av.cols() != bv.cols())
    throw ShapeError("matmul_nt: " + av.shape_str() + " x " + bv.shape_str() + "^T");
  Tensor out(av.rows(), bv.rows());
  mm_nt(av, bv, out);
  return push(std::move(out), {a, b},
              [a, b](Tape& t, const Tensor& g) {
                if (t.requires_grad(a)) {
                  Tensor da(t.val(a).rows(), t.val(a).cols());
                  mm_nn(g, t.val(b), da);  // G B
                  t.accumulate_grad(a, da);
                }
                if (t.requires_grad(b)) {
                  Tensor db(t.val(b).rows(), t.val(b).cols());
                  mm_tn(g, t.val(a), db);  // G^T A
                  t.accumulate_grad(b, db);
                }
              },
              "matmul_nt");
}

namespace {

int broadcast_mode(const Tensor& a, const Tensor& b, const char* name) {
  if (a.same_shape(b)) return 0;
  if (b.rows() == 1 && b.cols() == 1) return 2;
  if (b.rows() == 1 && b.cols() == a.cols()) return 1;
  throw ShapeError(std::string(name) + ": " + a.shape_str() + " vs " + b.shape_str());
}

double b_at(const Tensor& b, int mode, std::size_t i, std::size_t j) {
  if (mode == 0) return b.at(i, j);
  if (mode == 1) return b.at(0, j);
  return b.data[0];
}

// Reduce a full-shaped cotangent onto b's broadcast shape.
void reduce_into(Tensor& db, int mode, std::size_t i, std::size_t j, double v) {
  if (mode == 0)
    db.at(i, j) += v;
  else if (mode == 1)
    db.at(0, j) += v;
  else
    db.data[0] += v;
}

}  // namespace

Var Tape::add(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  int mode = broadcast_mode(av, bv, "add");
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j)
      out.at(i, j) = av.at(i, j) + b_at(bv, mode, i, j);
  return push(std::move(out), {a, b},
              [a, b, mode](Tape& t, const Tensor& g) {
                if (t.requires_grad(a)) t.accumulate_grad(a, g);
                if (t.requires_grad(b)) {
                  Tensor db(t.val(b).rows(), t.val(b).cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      reduce_into(db, mode, i, j, g.at(i, j));
                  t.accumulate_grad(b, db);
                }
              },
              "add");
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  int mode = broadcast_mode(av, bv, "sub");
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j)
      out.at(i, j) = av.at(i, j) - b_at(bv, mode, i, j);
  return push(std::move(out), {a, b},
              [a, b, mode](Tape& t, const Tensor& g) {
                if (t.requires_grad(a)) t.accumulate_grad(a, g);
                if (t.requires_grad(b)) {
                  Tensor db(t.val(b).rows(), t.val(b).cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      reduce_into(db, mode, i, j, -g.at(i, j));
                  t.accumulate_grad(b, db);
                }
              },
              "sub");
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  int mode = broadcast_mode(av, bv, "mul");
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j)
      out.at(i, j) = av.at(i, j) * b_at(bv, mode, i, j);
  return push(std::move(out), {a, b},
              [a, b, mode](Tape& t, const Tensor& g) {
                const Tensor& avv = t.val(a);
                const Tensor& bvv = t.val(b);
                if (t.requires_grad(a)) {
                  Tensor da(avv.rows(), avv.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      da.at(i, j) = g.at(i, j) * b_at(bvv, mode, i, j);
                  t.accumulate_grad(a, da);
                }
                if (t.requires_grad(b)) {
                  Tensor db(bvv.rows(), bvv.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      reduce_into(db, mode, i, j, g.at(i, j) * avv.at(i, j));
                  t.accumulate_grad(b, db);
                }
              },
              "mul");
}

Var Tape::div(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  int mode = broadcast_mode(av, bv, "div");
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j)
      out.at(i, j) = av.at(i, j) / b_at(bv, mode, i, j);
  return push(std::move(out), {a, b},
              [a, b, mode](Tape& t, const Tensor& g) {
                const Tensor& avv = t.val(a);
                const Tensor& bvv = t.val(b);
                if (t.requires_grad(a)) {
                  Tensor da(avv.rows(), avv.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      da.at(i, j) = g.at(i, j) / b_at(bvv, mode, i, j);
                  t.accumulate_grad(a, da);
                }
                if (t.requires_grad(b)) {
                  Tensor db(bvv.rows(), bvv.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) {
                      double bb = b_at(bvv, mode, i, j);
                      reduce_into(db, mode, i, j, -g.at(i, j) * avv.at(i, j) / (bb * bb));
                    }
                  t.accumulate_grad(b, db);
                }
              },
              "div");
}

Var Tape::scale(Var a, double c) {
  Tensor out = val(a);
  for (double& x : out.data) x *= c;
  return push(std::move(out), {a},
              [a, c](Tape& t, const Tensor& g) {
                Tensor da = g;
                for (double& x : da.data) x *= c;
                t.accumulate_grad(a, da);
              },
              "scale");
}

Var Tape::add_const(Var a, double c) {
  Tensor out = val(a);
  for (double& x : out.data) x += c;
  return push(std::move(out), {a},
              [a](Tape& t, const Tensor& g) { t.accumulate_grad(a, g); }, "add_const");
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::size_t n = val(parts[0]).rows();
  std::size_t total = 0;
  for (Var p : parts) {
    if (val(p).rows() != n) throw ShapeError("concat_cols: row count mismatch");
    total += val(p).cols();
  }
  Tensor out(n, total);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = val(p);
    for (std::size_t i = 0; i < n; ++i)
      std::copy(pv.row_ptr(i), pv.row_ptr(i) + pv.cols(), out.row_ptr(i) + off);
    off += pv.cols();
  }
  std::vector<Var> ins = parts;
  return push(std::move(out), ins,
              [parts](Tape& t, const Tensor& g) {
                std::size_t off = 0;
                for (Var p : parts) {
                  const Tensor& pv = t.val(p);
                  if (t.requires_grad(p)) {
                    Tensor dp(pv.rows(), pv.cols());
                    for (std::size_t i = 0; i < pv.rows(); ++i)
                      std::copy(g.row_ptr(i) + off, g.row_ptr(i) + off + pv.cols(),
                                dp.row_ptr(i));
                    t.accumulate_grad(p, dp);
                  }
                  off += pv.cols();
                }
              },
              "concat_cols");
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  std::size_t c = val(parts[0]).cols();
  std::size_t total = 0;
  for (Var p : parts) {
    if (val(p).cols() != c) throw ShapeError("concat_rows: column count mismatch");
    total += val(p).rows();
  }
  Tensor out(total, c);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = val(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off * c);
    off += pv.rows();
  }
  std::vector<Var> ins = parts;
  return push(std::move(out), ins,
              [parts, c](Tape& t, const Tensor& g) {
                std::size_t off = 0;
                for (Var p : parts) {
                  const Tensor& pv = t.val(p);
                  if (t.requires_grad(p)) {
                    Tensor dp(pv.rows(), pv.cols());
                    std::copy(g.data.begin() + off * c,
                              g.data.begin() + (off + pv.rows()) * c, dp.data.begin());
                    t.accumulate_grad(p, dp);
                  }
                  off += pv.rows();
                }
              },
              "concat_rows");
}

Var Tape::select_rows(Var a, const std::vector<int>& ids) {
  const Tensor& av = val(a);
  Tensor out(ids.size(), av.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    int r = ids[i];
    if (r < 0 || static_cast<std::size_t>(r) >= av.rows())
      throw ShapeError("select_rows: row index out of range");
    std::copy(av.row_ptr(static_cast<std::size_t>(r)),
              av.row_ptr(static_cast<std::size_t>(r)) + av.cols(), out.row_ptr(i));
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return push(std::move(out), {a},
              [a, ids_copy](Tape& t, const Tensor& g) {
                Tensor da(t.val(a).rows(), t.val(a).cols());
                for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                  double* dst = da.row_ptr(static_cast<std::size_t>((*ids_copy)[i]));
                  const double* src = g.row_ptr(i);
                  for (std::size_t j = 0; j < g.cols(); ++j) dst[j] += src[j];
                }
                t.accumulate_grad(a, da);
              },
              "select_rows");
}

Var Tape::select_cols(Var a, std::size_t offset, std::size_t len) {
  const Tensor& av = val(a);
  if (offset + len > av.cols()) throw ShapeError("select_cols: slice out of range");
  Tensor out(av.rows(), len);
  for (std::size_t i = 0; i < av.rows(); ++i)
    std::copy(av.row_ptr(i) + offset, av.row_ptr(i) + offset + len, out.row_ptr(i));
  return push(std::move(out), {a},
              [a, offset, len](Tape& t, const Tensor& g) {
                Tensor da(t.val(a).rows(), t.val(a).cols());
                for (std::size_t i = 0; i < g.rows(); ++i)
                  std::copy(g.row_ptr(i), g.row_ptr(i) + len, da.row_ptr(i) + offset);
                t.accumulate_grad(a, da);
              },
              "select_cols");
}

Var Tape::reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& av = val(a);
  if (rows * cols != av.numel()) throw ShapeError("reshape: element count mismatch");
  Tensor out(rows, cols);
  out.data = av.data;
  std::size_t ar = av.rows(), ac = av.cols();
  return push(std::move(out), {a},
              [a, ar, ac](Tape& t, const Tensor& g) {
                Tensor da(ar, ac);
                da.data = g.data;
                t.accumulate_grad(a, da);
              },
              "reshape");
}

Var Tape::sum_all(Var a) {
  const Tensor& av = val(a);
  double s = 0.0;
  for (double x : av.data) s += x;
  return push(Tensor::scalar(s), {a},
              [a](Tape& t, const Tensor& g) {
                Tensor da(t.val(a).rows(), t.val(a).cols());
                std::fill(da.data.begin(), da.data.end(), g.data[0]);
                t.accumulate_grad(a, da);
              },
              "sum_all");
}

Var Tape::mean_all(Var a) {
  const Tensor& av = val(a);
  if (av.numel() == 0) throw ShapeError("mean_all: empty tensor");
  double s = 0.0;
  for (double x : av.data) s += x;
  double inv = 1.0 / static_cast<double>(av.numel());
  return push(Tensor::scalar(s * inv), {a},
              [a, inv](Tape& t, const Tensor& g) {
                Tensor da(t.val(a).rows(), t.val(a).cols());
                std::fill(da.data.begin(), da.data.end(), g.data[0] * inv);
                t.accumulate_grad(a, da);
              },
              "mean_all");
}

Var Tape::mean_rows(Var a) {
  const Tensor& av = val(a);
  if (av.rows() == 0) throw ShapeError("mean_rows: empty tensor");
  Tensor out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out.data[j] += av.at(i, j);
  double inv = 1.0 / static_cast<double>(av.rows());
  for (double& x : out.data) x *= inv;
  return push(std::move(out), {a},
              [a, inv](Tape& t, const Tensor& g) {
                Tensor da(t.val(a).rows(), t.val(a).cols());
                for (std::size_t i = 0; i < da.rows(); ++i)
                  for (std::size_t j = 0; j < da.cols(); ++j)
                    da.at(i, j) = g.data[j] * inv;
                t.accumulate_grad(a, da);
              },
              "mean_rows");
}

Var Tape::sqrt_op(Var a) {
  Tensor out = val(a);
  for (double& x : out.data) x = std::sqrt(x);
  auto saved = std::make_shared<Tensor>(out);
  return push(std::move(out), {a},
              [a, saved](Tape& t, const Tensor& g) {
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                  // d sqrt at 0 is unbounded; a zero cotangent still
                  // contributes zero rather than 0 * inf.
                  da.data[i] = (g.data[i] == 0.0) ? 0.0 : g.data[i] / (2.0 * saved->data[i]);
                }
                t.accumulate_grad(a, da);
              },
              "sqrt");
}

Var Tape::gelu(Var a) {
  const Tensor& av = val(a);
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.data.size(); ++i) {
    double x = av.data[i];
    out.data[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return push(std::move(out), {a},
              [a](Tape& t, const Tensor& g) {
                const Tensor& avv = t.val(a);
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                  double x = avv.data[i];
                  double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                  double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                  da.data[i] = g.data[i] * (cdf + x * pdf);
                }
                t.accumulate_grad(a, da);
              },
              "gelu");
}

Var Tape::sigmoid(Var a) {
  const Tensor& av = val(a);
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.data.size(); ++i) out.data[i] = stable_sigmoid(av.data[i]);
  auto saved = std::make_shared<Tensor>(out);
  return push(std::move(out), {a},
              [a, saved](Tape& t, const Tensor& g) {
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                  double y = saved->data[i];
                  da.data[i] = g.data[i] * y * (1.0 - y);
                }
                t.accumulate_grad(a, da);
              },
              "sigmoid");
}

Var Tape::relu(Var a) {
  const Tensor& av = val(a);
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.data.size(); ++i) out.data[i] = std::max(0.0, av.data[i]);
  return push(std::move(out), {a},
              [a](Tape& t, const Tensor& g) {
                const Tensor& avv = t.val(a);
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.data.size(); ++i)
                  da.data[i] = avv.data[i] > 0.0 ? g.data[i] : 0.0;
                t.accumulate_grad(a, da);
              },
              "relu");
}

Var Tape::layer_norm(Var a, double eps) {
  const Tensor& av = val(a);
  if (av.cols() == 0) throw ShapeError("layer_norm: empty rows");
  Tensor out(av.rows(), av.cols());
  auto inv_std = std::make_shared<std::vector<double>>(av.rows());
  std::size_t c = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const double* x = av.row_ptr(i);
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = x[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = inv;
    double* y = out.row_ptr(i);
    for (std::size_t j = 0; j < c; ++j) y[j] = (x[j] - mu) * inv;
  }
  auto saved = std::make_shared<Tensor>(out);
  return push(std::move(out), {a},
              [a, saved, inv_std, c](Tape& t, const Tensor& g) {
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.rows(); ++i) {
                  const double* gr = g.row_ptr(i);
                  const double* y = saved->row_ptr(i);
                  double gm = 0.0, gym = 0.0;
                  for (std::size_t j = 0; j < c; ++j) {
                    gm += gr[j];
                    gym += gr[j] * y[j];
                  }
                  gm /= static_cast<double>(c);
                  gym /= static_cast<double>(c);
                  double inv = (*inv_std)[i];
                  double* d = da.row_ptr(i);
                  for (std::size_t j = 0; j < c; ++j)
                    d[j] = inv * (gr[j] - gm - y[j] * gym);
                }
                t.accumulate_grad(a, da);
              },
              "layer_norm");
}

Var Tape::l2_normalize(Var a, double eps) {
  const Tensor& av = val(a);
  Tensor out(av.rows(), av.cols());
  auto norms = std::make_shared<std::vector<double>>(av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double n = l2_norm(av.row_ptr(i), av.cols());
    if (n < eps) throw NumericFault("l2_normalize: zero-norm row");
    (*norms)[i] = n;
    for (std::size_t j = 0; j < av.cols(); ++j) out.at(i, j) = av.at(i, j) / n;
  }
  auto saved = std::make_shared<Tensor>(out);
  return push(std::move(out), {a},
              [a, saved, norms](Tape& t, const Tensor& g) {
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.rows(); ++i) {
                  const double* gr = g.row_ptr(i);
                  const double* y = saved->row_ptr(i);
                  double gy = dot(gr, y, g.cols());
                  double inv = 1.0 / (*norms)[i];
                  for (std::size_t j = 0; j < g.cols(); ++j)
                    da.at(i, j) = (gr[j] - gy * y[j]) * inv;
                }
                t.accumulate_grad(a, da);
              },
              "l2_normalize");
}

Var Tape::softmax(Var a) {
  const Tensor& av = val(a);
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const double* x = av.row_ptr(i);
    double mx = x[0];
    for (std::size_t j = 1; j < av.cols(); ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    double* y = out.row_ptr(i);
    for (std::size_t j = 0; j < av.cols(); ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (std::size_t j = 0; j < av.cols(); ++j) y[j] /= z;
  }
  auto saved = std::make_shared<Tensor>(out);
  return push(std::move(out), {a},
              [a, saved](Tape& t, const Tensor& g) {
                Tensor da(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.rows(); ++i) {
                  const double* gr = g.row_ptr(i);
                  const double* y = saved->row_ptr(i);
                  double gy = dot(gr, y, g.cols());
                  for (std::size_t j = 0; j < g.cols(); ++j)
                    da.at(i, j) = y[j] * (gr[j] - gy);
                }
                t.accumulate_grad(a, da);
              },
              "softmax");
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& lv = val(logits);
  if (labels.size() != lv.rows())
    throw ShapeError("cross_entropy: label count " + std::to_string(labels.size()) +
                     " vs rows " + std::to_string(lv.rows()));
  auto probs = std::make_shared<Tensor>(lv.rows(), lv.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    int lab = labels[i];
    if (lab < 0 || static_cast<std::size_t>(lab) >= lv.cols())
      throw ShapeError("cross_entropy: label out of range");
    const double* x = lv.row_ptr(i);
    double mx = x[0];
    for (std::size_t j = 1; j < lv.cols(); ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < lv.cols(); ++j) z += std::exp(x[j] - mx);
    double lse = std::log(z) + mx;
    total += lse - x[static_cast<std::size_t>(lab)];
    double* p = probs->row_ptr(i);
    for (std::size_t j = 0; j < lv.cols(); ++j) p[j] = std::exp(x[j] - mx) / z;
  }
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return push(Tensor::scalar(total), {logits},
              [logits, probs, labels_copy](Tape& t, const Tensor& g) {
                double gs = g.data[0];
                Tensor da(probs->rows(), probs->cols());
                for (std::size_t i = 0; i < probs->rows(); ++i) {
                  const double* p = probs->row_ptr(i);
                  double* d = da.row_ptr(i);
                  for (std::size_t j = 0; j < probs->cols(); ++j) d[j] = gs * p[j];
                  d[static_cast<std::size_t>((*labels_copy)[i])] -= gs;
                }
                t.accumulate_grad(logits, da);
              },
              "cross_entropy");
}

Var Tape::mean_over_neighbors(Var h,
                              std::shared_ptr<const std::vector<std::vector<int>>> nbrs) {
  const Tensor& hv = val(h);
  Tensor out(nbrs->size(), hv.cols());
  for (std::size_t i = 0; i < nbrs->size(); ++i) {
    const auto& list = (*nbrs)[i];
    if (list.empty()) continue;
    double* o = out.row_ptr(i);
    for (int u : list) {
      if (u < 0 || static_cast<std::size_t>(u) >= hv.rows())
        throw ShapeError("mean_over_neighbors: neighbor index out of range");
      const double* r = hv.row_ptr(static_cast<std::size_t>(u));
      for (std::size_t j = 0; j < hv.cols(); ++j) o[j] += r[j];
    }
    double inv = 1.0 / static_cast<double>(list.size());
    for (std::size_t j = 0; j < hv.cols(); ++j) o[j] *= inv;
  }
  return push(std::move(out), {h},
              [h, nbrs](Tape& t, const Tensor& g) {
                Tensor dh(t.val(h).rows(), t.val(h).cols());
                for (std::size_t i = 0; i < nbrs->size(); ++i) {
                  const auto& list = (*nbrs)[i];
                  if (list.empty()) continue;
                  double inv = 1.0 / static_cast<double>(list.size());
                  const double* gr = g.row_ptr(i);
                  for (int u : list) {
                    double* d = dh.row_ptr(static_cast<std::size_t>(u));
                    for (std::size_t j = 0; j < g.cols(); ++j) d[j] += gr[j] * inv;
                  }
                }
                t.accumulate_grad(h, dh);
              },
              "mean_over_neighbors");
}

Var Tape::rows_weighted_sum(Var h, Var w) {
  const Tensor& hv = val(h);
  const Tensor& wv = val(w);
  if (wv.rows() != 1 || wv.cols() != hv.rows())
    throw ShapeError("rows_weighted_sum: weights " + wv.shape_str() + " vs rows " +
                     std::to_string(hv.rows()));
  Tensor out(1, hv.cols());
  for (std::size_t i = 0; i < hv.rows(); ++i) {
    double wi = wv.data[i];
    if (wi == 0.0) continue;
    const double* r = hv.row_ptr(i);
    for (std::size_t j = 0; j < hv.cols(); ++j) out.data[j] += wi * r[j];
  }
  return push(std::move(out), {h, w},
              [h, w](Tape& t, const Tensor& g) {
                const Tensor& hvv = t.val(h);
                const Tensor& wvv = t.val(w);
                if (t.requires_grad(h)) {
                  Tensor dh(hvv.rows(), hvv.cols());
                  for (std::size_t i = 0; i < hvv.rows(); ++i) {
                    double wi = wvv.data[i];
                    if (wi == 0.0) continue;
                    double* d = dh.row_ptr(i);
                    for (std::size_t j = 0; j < hvv.cols(); ++j) d[j] = wi * g.data[j];
                  }
                  t.accumulate_grad(h, dh);
                }
                if (t.requires_grad(w)) {
                  Tensor dw(1, hvv.rows());
                  for (std::size_t i = 0; i < hvv.rows(); ++i)
                    dw.data[i] = dot(g.data.data(), hvv.row_ptr(i), hvv.cols());
                  t.accumulate_grad(w, dw);
                }
              },
              "rows_weighted_sum");
}

Var Tape::gaussian_rbf(Var x, Var y, const std::vector<double>& gammas) {
  const Tensor& xv = val(x);
  const Tensor& yv = val(y);
  if (xv.cols() != yv.cols())
    throw ShapeError("gaussian_rbf: " + xv.shape_str() + " vs " + yv.shape_str());
  if (gammas.empty()) throw ShapeError("gaussian_rbf: empty bandwidth set");
  for (double g : gammas)
    if (!(g > 0.0)) throw ShapeError("gaussian_rbf: bandwidths must be positive");
  auto d2 = std::make_shared<Tensor>(xv.rows(), yv.rows());
  Tensor out(xv.rows(), yv.rows());
  double invg = 1.0 / static_cast<double>(gammas.size());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < yv.rows(); ++j) {
      double d = sq_dist(xv.row_ptr(i), yv.row_ptr(j), xv.cols());
      d2->at(i, j) = d;
      double k = 0.0;
      for (double gm : gammas) k += std::exp(-d / (2.0 * gm * gm));
      out.at(i, j) = k * invg;
    }
  auto gammas_copy = std::make_shared<std::vector<double>>(gammas);
  return push(std::move(out), {x, y},
              [x, y, d2, gammas_copy, invg](Tape& t, const Tensor& g) {
                const Tensor& xvv = t.val(x);
                const Tensor& yvv = t.val(y);
                bool gx = t.requires_grad(x), gy = t.requires_grad(y);
                if (!gx && !gy) return;
                Tensor dx(xvv.rows(), xvv.cols());
                Tensor dy(yvv.rows(), yvv.cols());
                for (std::size_t i = 0; i < xvv.rows(); ++i)
                  for (std::size_t j = 0; j < yvv.rows(); ++j) {
                    double gij = g.at(i, j);
                    if (gij == 0.0) continue;
                    double d = d2->at(i, j);
                    double w = 0.0;
                    for (double gm : *gammas_copy) {
                      double g2 = gm * gm;
                      w += std::exp(-d / (2.0 * g2)) / g2;
                    }
                    // dK/d(x_i) = -w * (x_i - y_j) / |gammas|
                    w *= gij * invg;
                    const double* xi = xvv.row_ptr(i);
                    const double* yj = yvv.row_ptr(j);
                    for (std::size_t c = 0; c < xvv.cols(); ++c) {
                      double diff = xi[c] - yj[c];
                      if (gx) dx.at(i, c) -= w * diff;
                      if (gy) dy.at(j, c) += w * diff;
                    }
                  }
                if (gx) t.accumulate_grad(x, dx);
                if (gy) t.accumulate_grad(y, dy);
              },
              "gaussian_rbf");
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size())
    throw ShapeError("AdamW::step: parameter/gradient count mismatch");
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  if (m_.size() != params.size())
    throw ShapeError("AdamW::step: parameter group size changed");
  double sq = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->same_shape(*grads[k]))
      throw ShapeError("AdamW::step: gradient shape mismatch at parameter " +
                       std::to_string(k));
    for (double g : grads[k]->data) {
      if (!std::isfinite(g)) throw NumericFault("AdamW::step: non-finite gradient");
      sq += g * g;
    }
  }
  double norm = std::sqrt(sq);
  double gscale = 1.0;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) gscale = cfg_.clip_norm / norm;
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      double gi = g.data[i] * gscale;
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      p.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                              cfg_.weight_decay * p.data[i]);
      if (!std::isfinite(p.data[i]))
        throw NumericFault("AdamW::step: non-finite parameter after update");
    }
  }
}

double grad_check(const std::function<Var(Tape&, Var)>& build, const Tensor& point,
                  double step) {
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.input(point);
    Var loss = build(tape, x);
    tape.backward(loss);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.input(p);
    Var loss = build(tape, x);
    return tape.val(loss).data[0];
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.data.size(); ++i) {
    double orig = probe.data[i];
    probe.data[i] = orig + step;
    double up = eval(probe);
    probe.data[i] = orig - step;
    double down = eval(probe);
    probe.data[i] = orig;
    double numeric = (up - down) / (2.0 * step);
    double rel = std::abs(analytic.data[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace hgl
