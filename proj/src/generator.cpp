#include "hgl/generator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include <json.hpp>

namespace hgl {
namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(rows, cols);
  double std = std::sqrt(2.0 / static_cast<double>(rows + cols));
  for (auto& x : t.data) x = rng.normal() * std;
  return t;
}

void warn(Warnings* sink, std::string msg) {
  if (sink) sink->push_back(std::move(msg));
}

// gelu(layer_norm(x W^T + b))
Var dense_block(Tape& tape, Var x, Var w, Var b) {
  return tape.gelu(tape.layer_norm(tape.add(tape.matmul_nt(x, w), b)));
}

Var dense(Tape& tape, Var x, Var w, Var b) {
  return tape.add(tape.matmul_nt(x, w), b);
}

// Indices of the k largest entries, ties resolved toward the lower index.
std::vector<int> hard_topk(const std::vector<double>& x, int k) {
  std::vector<int> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return x[static_cast<std::size_t>(a)] >
                                              x[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

AdaINStats AdaINStats::from_features(const Tensor& clean, double eps) {
  if (clean.rows() == 0 || clean.cols() == 0)
    throw ShapeError("AdaINStats: clean feature matrix is empty");
  std::size_t n = clean.rows(), d = clean.cols();
  AdaINStats s;
  s.eps = eps;
  s.mu = Tensor(1, d);
  s.sigma = Tensor(1, d);
  for (std::size_t c = 0; c < d; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += clean.at(r, c);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double dlt = clean.at(r, c) - m;
      v += dlt * dlt;
    }
    v /= static_cast<double>(n);  // population variance
    s.mu.at(0, c) = m;
    s.sigma.at(0, c) = std::sqrt(v);
  }
  return s;
}

TriggerGenerator TriggerGenerator::init(const HeteroGraph& g, const SchemaRoles& roles,
                                        GeneratorConfig cfg, Rng& rng) {
  std::vector<std::string> bad;
  if (cfg.noise_dim <= 0) bad.push_back("noise_dim must be positive");
  if (cfg.heads <= 0) bad.push_back("heads must be positive");
  if (cfg.head_dim <= 0) bad.push_back("head_dim must be positive");
  if (cfg.hidden <= 0) bad.push_back("hidden must be positive");
  if (cfg.p_mask < 0.0 || cfg.p_mask >= 1.0) bad.push_back("p_mask must lie in [0, 1)");
  if (cfg.gumbel_temp <= 0.0) bad.push_back("gumbel_temp must be positive");
  if (cfg.tau < 0.0) bad.push_back("tau must be non-negative");
  if (cfg.triggers_per_victim <= 0) bad.push_back("triggers_per_victim must be positive");
  if (cfg.adain_eps <= 0.0) bad.push_back("adain_eps must be positive");
  if (!bad.empty()) {
    std::string msg = "GeneratorConfig invalid:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }

  TriggerGenerator gen;
  gen.cfg = cfg;
  gen.victim_dim = g.feature_dim(roles.primary);
  gen.trigger_dim = g.feature_dim(roles.trigger);
  gen.aux_types = roles.auxiliary;
  for (TypeId t : gen.aux_types) gen.aux_dims.push_back(g.feature_dim(t));

  std::size_t h = static_cast<std::size_t>(cfg.hidden);
  std::size_t dv = static_cast<std::size_t>(gen.victim_dim);
  std::size_t dt = static_cast<std::size_t>(gen.trigger_dim);
  std::size_t dq = dv + dt + static_cast<std::size_t>(cfg.noise_dim);
  std::size_t da = static_cast<std::size_t>(cfg.heads * cfg.head_dim);

  gen.fw1 = glorot(h, dv, rng);
  gen.fb1 = Tensor(1, h);
  gen.fw2 = glorot(h, h, rng);
  gen.fb2 = Tensor(1, h);
  gen.fw3 = glorot(dt, h, rng);
  gen.fb3 = Tensor(1, dt);
  gen.qw1 = glorot(h, dq, rng);
  gen.qb1 = Tensor(1, h);
  gen.qw2 = glorot(da, h, rng);
  gen.qb2 = Tensor(1, da);
  for (int dim : gen.aux_dims) {
    std::array<Tensor, 4> k;
    k[0] = glorot(h, static_cast<std::size_t>(dim), rng);
    k[1] = Tensor(1, h);
    k[2] = glorot(da, h, rng);
    k[3] = Tensor(1, da);
    gen.key.push_back(std::move(k));
  }
  return gen;
}

std::vector<Tensor*> TriggerGenerator::params() {
  std::vector<Tensor*> p = {&fw1, &fb1, &fw2, &fb2, &fw3, &fb3, &qw1, &qb1, &qw2, &qb2};
  for (auto& k : key)
    for (auto& t : k) p.push_back(&t);
  return p;
}

std::vector<const Tensor*> TriggerGenerator::params() const {
  std::vector<const Tensor*> p = {&fw1, &fb1, &fw2, &fb2, &fw3, &fb3, &qw1, &qb1, &qw2, &qb2};
  for (const auto& k : key)
    for (const auto& t : k) p.push_back(&t);
  return p;
}

std::vector<std::string> TriggerGenerator::param_names() const {
  std::vector<std::string> n = {"feat.w1", "feat.b1", "feat.w2", "feat.b2", "feat.w3",
                                "feat.b3", "query.w1", "query.b1", "query.w2", "query.b2"};
  for (std::size_t a = 0; a < key.size(); ++a) {
    std::string base = "key." + std::to_string(a) + ".";
    n.push_back(base + "w1");
    n.push_back(base + "b1");
    n.push_back(base + "w2");
    n.push_back(base + "b2");
  }
  return n;
}

GenVars lift_generator(Tape& tape, const TriggerGenerator& gen, bool as_inputs) {
  auto lift = [&](const Tensor& t) { return as_inputs ? tape.input(t) : tape.constant(t); };
  GenVars v;
  v.fw1 = lift(gen.fw1);
  v.fb1 = lift(gen.fb1);
  v.fw2 = lift(gen.fw2);
  v.fb2 = lift(gen.fb2);
  v.fw3 = lift(gen.fw3);
  v.fb3 = lift(gen.fb3);
  v.qw1 = lift(gen.qw1);
  v.qb1 = lift(gen.qb1);
  v.qw2 = lift(gen.qw2);
  v.qb2 = lift(gen.qb2);
  v.flat = {v.fw1, v.fb1, v.fw2, v.fb2, v.fw3, v.fb3, v.qw1, v.qb1, v.qw2, v.qb2};
  for (const auto& k : gen.key) {
    std::array<Var, 4> kv;
    for (int i = 0; i < 4; ++i) {
      kv[static_cast<std::size_t>(i)] = lift(k[static_cast<std::size_t>(i)]);
      v.flat.push_back(kv[static_cast<std::size_t>(i)]);
    }
    v.key.push_back(kv);
  }
  return v;
}

Var gen_features(Tape& tape, const TriggerGenerator& gen, const GenVars& vars, Var victims) {
  (void)gen;
  Var h1 = dense_block(tape, victims, vars.fw1, vars.fb1);
  Var h2 = dense_block(tape, h1, vars.fw2, vars.fb2);
  return dense(tape, h2, vars.fw3, vars.fb3);
}

Var adain(Tape& tape, Var batch, const AdaINStats& stats, Warnings* warnings) {
  const Tensor& b = tape.val(batch);
  if (b.cols() != stats.mu.cols())
    throw ShapeError("adain: batch width " + b.shape_str() + " does not match stats width " +
                     stats.mu.shape_str());
  if (b.rows() == 1)
    warn(warnings,
         "adain: single-row batch has zero spread; output collapses to the clean mean");
  Var mu_b = tape.mean_rows(batch);
  Var centered = tape.sub(batch, mu_b);
  Var var_b = tape.mean_rows(tape.mul(centered, centered));
  Var sigma_b = tape.sqrt_op(var_b);
  Var denom = tape.add_const(sigma_b, stats.eps);
  Var x_hat = tape.div(centered, denom);
  Var scaled = tape.mul(x_hat, tape.constant(stats.sigma));
  return tape.add(scaled, tape.constant(stats.mu));
}

Var attention_logits(Tape& tape, const std::vector<Var>& q_heads,
                     const std::vector<Var>& k_heads) {
  if (q_heads.empty() || q_heads.size() != k_heads.size())
    throw ShapeError("attention_logits: query/key head counts differ");
  std::size_t dm = tape.val(q_heads[0]).cols();
  Var acc;
  for (std::size_t h = 0; h < q_heads.size(); ++h) {
    if (tape.val(q_heads[h]).cols() != dm || tape.val(k_heads[h]).cols() != dm)
      throw ShapeError("attention_logits: head width mismatch");
    Var qn = tape.l2_normalize(q_heads[h]);
    Var kn = tape.l2_normalize(k_heads[h]);
    Var s = tape.matmul_nt(qn, kn);  // {1, P}
    acc = (h == 0) ? s : tape.add(acc, s);
  }
  double denom = static_cast<double>(q_heads.size()) * std::sqrt(static_cast<double>(dm));
  return tape.scale(acc, 1.0 / denom);
}

std::vector<Var> pool_key_heads(Tape& tape, const TriggerGenerator& gen, const GenVars& vars,
                                int aux_index, Var pool_features) {
  const auto& kv = vars.key.at(static_cast<std::size_t>(aux_index));
  Var h = dense_block(tape, pool_features, kv[0], kv[1]);
  Var out = dense(tape, h, kv[2], kv[3]);  // {P, heads * head_dim}
  std::vector<Var> heads;
  std::size_t dm = static_cast<std::size_t>(gen.cfg.head_dim);
  for (int i = 0; i < gen.cfg.heads; ++i)
    heads.push_back(tape.select_cols(out, static_cast<std::size_t>(i) * dm, dm));
  return heads;
}

Var connection_logits(Tape& tape, const TriggerGenerator& gen, const GenVars& vars,
                      int aux_index, Var condition, const std::vector<Var>& key_heads) {
  Var qh = dense_block(tape, condition, vars.qw1, vars.qb1);
  Var q = dense(tape, qh, vars.qw2, vars.qb2);  // {1, heads * head_dim}
  std::vector<Var> q_heads;
  std::size_t dm = static_cast<std::size_t>(gen.cfg.head_dim);
  for (int i = 0; i < gen.cfg.heads; ++i)
    q_heads.push_back(tape.select_cols(q, static_cast<std::size_t>(i) * dm, dm));
  (void)aux_index;
  return attention_logits(tape, q_heads, key_heads);
}

MaskedLogits random_mask(Tape& tape, Var logits, double p_mask, int k, Rng& rng) {
  const Tensor& lv = tape.val(logits);
  if (lv.rows() != 1) throw ShapeError("random_mask: logits must be a row vector");
  int p = static_cast<int>(lv.cols());
  if (k < 1 || k > p)
    throw ShapeError("random_mask: k = " + std::to_string(k) + " outside [1, " +
                     std::to_string(p) + "]");
  MaskedLogits ml;
  ml.logits = logits;
  ml.masked.assign(static_cast<std::size_t>(p), 0);
  if (p == k || p_mask <= 0.0) return ml;  // nothing to drop
  for (int attempt = 0; attempt < 10000; ++attempt) {
    int unmasked = 0;
    for (int i = 0; i < p; ++i) {
      ml.masked[static_cast<std::size_t>(i)] = rng.uniform() < p_mask ? 1 : 0;
      if (!ml.masked[static_cast<std::size_t>(i)]) ++unmasked;
    }
    if (unmasked >= k) return ml;
  }
  throw ConfigError("random_mask: no draw left " + std::to_string(k) +
                    " candidates unmasked after 10000 attempts (p_mask too high?)");
}

TopkState solve_shift(const std::vector<double>& x, int k) {
  int n = static_cast<int>(x.size());
  if (n == 0 || k < 1 || k > n)
    throw ShapeError("solve_shift: need 1 <= k <= n, got k = " + std::to_string(k) +
                     ", n = " + std::to_string(n));
  const double tol = 1e-10;
  auto residual = [&](double t) {
    double s = 0.0;
    for (double xi : x) s += stable_sigmoid(xi + t);
    return s - static_cast<double>(k);
  };
  double lo = -(*std::max_element(x.begin(), x.end())) - 40.0;
  double hi = -(*std::min_element(x.begin(), x.end())) + 40.0;
  double flo = residual(lo), fhi = residual(hi);
  double t = 0.0, ft = 0.0;
  if (std::abs(fhi) <= tol) {
    t = hi;
    ft = fhi;
  } else if (std::abs(flo) <= tol) {
    t = lo;
    ft = flo;
  } else {
    if (flo > 0.0 || fhi < 0.0)
      throw NumericFault("solve_shift: bracketing failed (non-finite logits?)");
    for (int it = 0; it < 200; ++it) {
      t = 0.5 * (lo + hi);
      ft = residual(t);
      if (std::abs(ft) <= tol) break;
      if (ft < 0.0)
        lo = t;
      else
        hi = t;
    }
  }
  TopkState st;
  st.shift = t;
  st.residual = ft;
  st.v.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = stable_sigmoid(x[static_cast<std::size_t>(i)] + t);
    st.v[static_cast<std::size_t>(i)] = s * (1.0 - s);
  }
  st.selection.assign(static_cast<std::size_t>(n), 0);
  for (int i : hard_topk(x, k)) st.selection[static_cast<std::size_t>(i)] = 1;
  return st;
}

Var topk_select(Tape& tape, const MaskedLogits& ml, int k, double temperature, Rng& gumbel_rng,
                SelectMode mode) {
  const Tensor& lv = tape.val(ml.logits);
  std::size_t p = lv.cols();
  if (lv.rows() != 1 || ml.masked.size() != p)
    throw ShapeError("topk_select: logits/mask shape mismatch");
  std::vector<int> unmasked;
  for (std::size_t i = 0; i < p; ++i)
    if (!ml.masked[i]) unmasked.push_back(static_cast<int>(i));
  int k_eff = std::min(k, static_cast<int>(unmasked.size()));
  if (k_eff < 1) throw ShapeError("topk_select: no unmasked candidates");

  std::vector<double> x(unmasked.size());
  for (std::size_t j = 0; j < unmasked.size(); ++j)
    x[j] = lv.at(0, static_cast<std::size_t>(unmasked[j]));
  TopkState st = solve_shift(x, k_eff);

  Tensor out(1, p);
  switch (mode) {
    case SelectMode::kTrain: {
      // One Gumbel draw per pool slot (masked included) keeps the stream
      // position independent of the mask realization.
      std::vector<double> noise(p);
      for (std::size_t i = 0; i < p; ++i) noise[i] = gumbel_rng.gumbel();
      std::vector<double> perturbed(unmasked.size());
      for (std::size_t j = 0; j < unmasked.size(); ++j)
        perturbed[j] = x[j] + temperature * noise[static_cast<std::size_t>(unmasked[j])];
      for (int j : hard_topk(perturbed, k_eff))
        out.at(0, static_cast<std::size_t>(unmasked[static_cast<std::size_t>(j)])) = 1.0;
      break;
    }
    case SelectMode::kInfer: {
      for (std::size_t j = 0; j < unmasked.size(); ++j)
        if (st.selection[j]) out.at(0, static_cast<std::size_t>(unmasked[j])) = 1.0;
      break;
    }
    case SelectMode::kSoft: {
      for (std::size_t j = 0; j < unmasked.size(); ++j)
        out.at(0, static_cast<std::size_t>(unmasked[j])) =
            stable_sigmoid(x[j] + st.shift);
      break;
    }
  }

  // Implicit-function gradient of the relaxed selection, evaluated on the
  // noiseless logits: r*v - (<r,v>/||v||_1) v, which maps a constant upstream
  // row to exactly zero.
  Var logits = ml.logits;
  std::vector<int> idx = unmasked;
  std::vector<double> v = st.v;
  auto backprop = [logits, idx, v](Tape& t, const Tensor& g) {
    Tensor dx(1, t.val(logits).cols());
    double rv = 0.0, l1 = 0.0;
    for (std::size_t j = 0; j < idx.size(); ++j)
      rv += g.at(0, static_cast<std::size_t>(idx[j])) * v[j];
    for (std::size_t j = 0; j < idx.size(); ++j) l1 += v[j];
    double ratio = rv / l1;
    for (std::size_t j = 0; j < idx.size(); ++j)
      dx.at(0, static_cast<std::size_t>(idx[j])) =
          g.at(0, static_cast<std::size_t>(idx[j])) * v[j] - ratio * v[j];
    t.accumulate_grad(logits, dx);
  };
  return tape.make_node(std::move(out), {ml.logits}, backprop, "topk_select");
}

Var diversity_loss(Tape& tape, const std::vector<std::vector<Var>>& selections_per_aux,
                   double tau, Warnings* warnings) {
  std::vector<Var> terms;
  for (std::size_t a = 0; a < selections_per_aux.size(); ++a) {
    std::vector<Var> sels;
    for (Var s : selections_per_aux[a])
      if (s.valid()) sels.push_back(s);
    std::size_t b = sels.size();
    if (b < 2) {
      warn(warnings, "diversity_loss: auxiliary slot " + std::to_string(a) + " has " +
                         std::to_string(b) + " pattern(s); skipped");
      continue;
    }
    Var stacked = tape.concat_rows(sels);               // {B, P}
    Var norm = tape.l2_normalize(stacked);              // rows to unit length
    Var gram = tape.matmul_nt(norm, norm);              // {B, B}
    Var hinged = tape.relu(tape.add_const(gram, -tau));
    Tensor off_diag = Tensor::full(b, b, 1.0);
    for (std::size_t i = 0; i < b; ++i) off_diag.at(i, i) = 0.0;
    Var masked = tape.mul(hinged, tape.constant(off_diag));
    double pairs = static_cast<double>(b) * static_cast<double>(b - 1);
    terms.push_back(tape.scale(tape.sum_all(masked), 1.0 / pairs));
  }
  if (terms.empty()) {
    warn(warnings, "diversity_loss: no auxiliary type had two or more patterns; loss is 0");
    return tape.constant(Tensor::scalar(0.0));
  }
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = tape.add(total, terms[i]);
  return tape.scale(total, 1.0 / static_cast<double>(terms.size()));
}

std::vector<std::tuple<int, NodeId, NodeId>> build_trigger_edges(
    const HeteroGraph& g, const SchemaRoles& roles, const CandidatePool& pool,
    const std::vector<NodeId>& victim_of,
    const std::vector<std::vector<std::vector<int>>>& selected) {
  if (selected.size() != victim_of.size())
    throw ShapeError("build_trigger_edges: one selection set per trigger required");
  std::vector<std::tuple<int, NodeId, NodeId>> edges;
  int vic_fwd = g.find_relation(roles.primary, roles.trigger);
  int vic_rev = g.find_relation(roles.trigger, roles.primary);
  if (vic_fwd < 0 && vic_rev < 0)
    throw SchemaError("build_trigger_edges: no relation joins the primary and trigger types");
  int base = g.num_nodes(roles.trigger);
  for (std::size_t t = 0; t < victim_of.size(); ++t) {
    NodeId trig = base + static_cast<NodeId>(t);
    if (vic_fwd >= 0)
      edges.emplace_back(vic_fwd, victim_of[t], trig);
    else
      edges.emplace_back(vic_rev, trig, victim_of[t]);
    const auto& per_aux = selected[t];
    if (per_aux.size() != roles.auxiliary.size())
      throw ShapeError("build_trigger_edges: one selection list per auxiliary type required");
    for (std::size_t a = 0; a < per_aux.size(); ++a) {
      if (per_aux[a].empty()) continue;
      TypeId aux = roles.auxiliary[a];
      const auto& tp = pool.for_type(aux);
      int fwd = g.find_relation(roles.trigger, aux);
      int rev = g.find_relation(aux, roles.trigger);
      if (fwd < 0 && rev < 0)
        throw SchemaError("build_trigger_edges: no relation joins the trigger type and '" +
                          g.type_name(aux) + "'");
      for (int pos : per_aux[a]) {
        NodeId member = tp.members.at(static_cast<std::size_t>(pos));
        if (fwd >= 0)
          edges.emplace_back(fwd, trig, member);
        else
          edges.emplace_back(rev, member, trig);
      }
    }
  }
  return edges;
}

GenerationTape generate_on_tape(Tape& tape, const TriggerGenerator& gen, const GenVars& vars,
                                const HeteroGraph& g, const SchemaRoles& roles,
                                const CandidatePool& pool, const std::vector<NodeId>& victims,
                                const AdaINStats& stats, const Tensor* refine_w,
                                const Tensor* refine_b, Rng& noise_rng, Rng& gumbel_rng,
                                Rng& mask_rng, SelectMode mode, Warnings* warnings) {
  if (victims.empty()) throw ShapeError("generate_on_tape: empty victim batch");
  std::size_t bsz = victims.size();
  std::size_t mult = static_cast<std::size_t>(gen.cfg.triggers_per_victim);
  std::size_t n_trig = bsz * mult;

  const Tensor& primary_feats = g.features(roles.primary);
  Tensor victim_rows(bsz, primary_feats.cols());
  for (std::size_t i = 0; i < bsz; ++i) {
    NodeId v = victims[i];
    if (v < 0 || v >= g.num_nodes(roles.primary))
      throw ShapeError("generate_on_tape: victim id " + std::to_string(v) + " out of range");
    std::copy_n(primary_feats.row_ptr(static_cast<std::size_t>(v)), primary_feats.cols(),
                victim_rows.row_ptr(i));
  }
  Var victim_batch = tape.constant(victim_rows);

  Var raw = gen_features(tape, gen, vars, victim_batch);
  Var feats = gen.cfg.use_adain ? adain(tape, raw, stats, warnings) : raw;
  if (refine_w != nullptr) {
    std::size_t dt = static_cast<std::size_t>(gen.trigger_dim);
    if (refine_w->rows() != dt || refine_w->cols() != dt || refine_b == nullptr ||
        refine_b->rows() != 1 || refine_b->cols() != dt)
      throw ShapeError("generate_on_tape: refinement affine has the wrong shape");
    feats = tape.add(tape.matmul_nt(feats, tape.constant(*refine_w)),
                     tape.constant(*refine_b));
  }

  std::vector<int> row_of(n_trig);
  for (std::size_t t = 0; t < n_trig; ++t) row_of[t] = static_cast<int>(t / mult);
  GenerationTape out;
  out.features = tape.select_rows(feats, row_of);

  // Per-auxiliary-type pool constants and shared key projections.
  std::size_t n_aux = roles.auxiliary.size();
  std::vector<std::vector<Var>> key_heads(n_aux);
  std::vector<int> link_budget(n_aux, 0);
  std::vector<const CandidatePool::TypePool*> pools(n_aux, nullptr);
  for (std::size_t a = 0; a < n_aux; ++a) {
    TypeId aux = roles.auxiliary[a];
    const auto& tp = pool.for_type(aux);
    pools[a] = &tp;
    if (tp.members.empty()) {
      warn(warnings, "generate_on_tape: empty candidate pool for type '" + g.type_name(aux) +
                         "'; triggers get no links of that type");
      continue;
    }
    if (tp.budget < 1) {
      warn(warnings, "generate_on_tape: link budget 0 for type '" + g.type_name(aux) +
                         "'; triggers get no links of that type");
      continue;
    }
    const Tensor& af = g.features(aux);
    Tensor rows(tp.members.size(), af.cols());
    for (std::size_t i = 0; i < tp.members.size(); ++i)
      std::copy_n(af.row_ptr(static_cast<std::size_t>(tp.members[i])), af.cols(),
                  rows.row_ptr(i));
    key_heads[a] =
        pool_key_heads(tape, gen, vars, static_cast<int>(a), tape.constant(rows));
    link_budget[a] = std::min<int>(tp.budget, static_cast<int>(tp.members.size()));
    if (static_cast<int>(tp.members.size()) < tp.budget)
      warn(warnings, "generate_on_tape: pool for type '" + g.type_name(aux) +
                         "' is smaller than the link budget; clamping to pool size");
  }

  std::vector<Tensor> noise(n_trig);
  for (std::size_t t = 0; t < n_trig; ++t) {
    Tensor z(1, static_cast<std::size_t>(gen.cfg.noise_dim));
    for (auto& x : z.data) x = noise_rng.normal();
    noise[t] = std::move(z);
  }

  for (std::size_t t = 0; t < n_trig; ++t) {
    TriggerSpec spec;
    spec.victim = victims[static_cast<std::size_t>(row_of[t])];
    spec.feature = tape.select_rows(out.features, {static_cast<int>(t)});
    Var victim_row = tape.select_rows(victim_batch, {row_of[t]});
    Var cond = tape.concat_cols({victim_row, spec.feature, tape.constant(noise[t])});
    out.raw_condition.push_back(cond);
    spec.selection.resize(n_aux);
    spec.hard_ids.resize(n_aux);
    spec.pool_pos.resize(n_aux);
    for (std::size_t a = 0; a < n_aux; ++a) {
      if (key_heads[a].empty()) continue;  // empty pool or zero budget
      Var logits = connection_logits(tape, gen, vars, static_cast<int>(a), cond, key_heads[a]);
      // Candidate masking is training-time exploration; inference and the
      // relaxed mode see the whole pool.
      double p_mask = mode == SelectMode::kTrain ? gen.cfg.p_mask : 0.0;
      MaskedLogits ml = random_mask(tape, logits, p_mask, link_budget[a], mask_rng);
      Var sel = topk_select(tape, ml, link_budget[a], gen.cfg.gumbel_temp, gumbel_rng, mode);
      spec.selection[a] = sel;
      std::vector<int> pos;
      if (mode == SelectMode::kSoft) {
        // Relaxed weights carry the forward; record the noiseless hard
        // selection for edge construction.
        std::vector<int> unmasked;
        std::vector<double> x;
        const Tensor& lvals = tape.val(ml.logits);
        for (std::size_t i = 0; i < ml.masked.size(); ++i)
          if (!ml.masked[i]) {
            unmasked.push_back(static_cast<int>(i));
            x.push_back(lvals.at(0, i));
          }
        for (int j : hard_topk(x, std::min<int>(link_budget[a],
                                                static_cast<int>(unmasked.size()))))
          pos.push_back(unmasked[static_cast<std::size_t>(j)]);
      } else {
        const Tensor& sv = tape.val(sel);
        for (std::size_t i = 0; i < sv.cols(); ++i)
          if (sv.at(0, i) == 1.0) pos.push_back(static_cast<int>(i));
      }
      spec.pool_pos[a] = pos;
      for (int p : pos)
        spec.hard_ids[a].push_back(pools[a]->members[static_cast<std::size_t>(p)]);
    }
    out.triggers.push_back(std::move(spec));
  }
  return out;
}

GenerationResult generate_delta(const TriggerGenerator& gen, const HeteroGraph& g,
                                const SchemaRoles& roles, const CandidatePool& pool,
                                const std::vector<NodeId>& victims, const AdaINStats& stats,
                                const Tensor* refine_w, const Tensor* refine_b, Rng& noise_rng,
                                Rng& gumbel_rng, Rng& mask_rng, SelectMode mode,
                                Warnings* warnings) {
  Tape tape;
  GenVars vars = lift_generator(tape, gen, /*as_inputs=*/false);
  GenerationTape gt = generate_on_tape(tape, gen, vars, g, roles, pool, victims, stats,
                                       refine_w, refine_b, noise_rng, gumbel_rng, mask_rng,
                                       mode, warnings);
  GenerationResult res;
  res.delta.new_features = tape.val(gt.features);
  std::vector<std::vector<std::vector<int>>> selected;
  for (const auto& spec : gt.triggers) {
    res.delta.victim_of.push_back(spec.victim);
    selected.push_back(spec.pool_pos);
  }
  res.delta.new_edges = build_trigger_edges(g, roles, pool, res.delta.victim_of, selected);
  res.patterns.resize(roles.auxiliary.size());
  for (std::size_t a = 0; a < roles.auxiliary.size(); ++a) {
    std::size_t psize = pool.for_type(roles.auxiliary[a]).members.size();
    for (const auto& spec : gt.triggers) {
      std::vector<std::uint8_t> pat(psize, 0);
      for (int p : spec.pool_pos[a]) pat[static_cast<std::size_t>(p)] = 1;
      res.patterns[a].push_back(std::move(pat));
    }
  }
  return res;
}

namespace {

using json = nlohmann::ordered_json;

json tensor_to_json(const Tensor& t) {
  json j;
  j["rows"] = t.rows();
  j["cols"] = t.cols();
  j["data"] = t.data;
  return j;
}

Tensor tensor_from_json(const json& j) {
  Tensor t(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != t.data.size())
    throw SchemaError("generator checkpoint: tensor payload size mismatch");
  t.data = std::move(data);
  return t;
}

}  // namespace

void save_generator_json(const std::string& path, const TriggerGenerator& gen,
                         const AdaINStats& stats) {
  json doc;
  doc["format_version"] = 1;
  doc["kind"] = "trigger_generator";
  json c;
  c["noise_dim"] = gen.cfg.noise_dim;
  c["heads"] = gen.cfg.heads;
  c["head_dim"] = gen.cfg.head_dim;
  c["hidden"] = gen.cfg.hidden;
  c["p_mask"] = gen.cfg.p_mask;
  c["gumbel_temp"] = gen.cfg.gumbel_temp;
  c["tau"] = gen.cfg.tau;
  c["triggers_per_victim"] = gen.cfg.triggers_per_victim;
  c["use_adain"] = gen.cfg.use_adain;
  c["adain_eps"] = gen.cfg.adain_eps;
  doc["config"] = c;
  doc["victim_dim"] = gen.victim_dim;
  doc["trigger_dim"] = gen.trigger_dim;
  doc["aux_types"] = gen.aux_types;
  doc["aux_dims"] = gen.aux_dims;
  json params = json::object();
  auto tensors = gen.params();
  auto names = gen.param_names();
  for (std::size_t i = 0; i < names.size(); ++i) params[names[i]] = tensor_to_json(*tensors[i]);
  doc["params"] = params;
  json st;
  st["mu"] = tensor_to_json(stats.mu);
  st["sigma"] = tensor_to_json(stats.sigma);
  st["eps"] = stats.eps;
  doc["adain"] = st;
  std::ofstream out(path);
  if (!out) throw ConfigError("save_generator_json: cannot open '" + path + "' for writing");
  out << doc.dump(1) << "\n";
}

LoadedGenerator load_generator_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_generator_json: cannot open '" + path + "'");
  json doc;
  in >> doc;
  if (doc.value("format_version", 0) != 1 || doc.value("kind", "") != "trigger_generator")
    throw SchemaError("load_generator_json: '" + path + "' is not a generator checkpoint");
  LoadedGenerator lg;
  const json& c = doc.at("config");
  lg.gen.cfg.noise_dim = c.at("noise_dim").get<int>();
  lg.gen.cfg.heads = c.at("heads").get<int>();
  lg.gen.cfg.head_dim = c.at("head_dim").get<int>();
  lg.gen.cfg.hidden = c.at("hidden").get<int>();
  lg.gen.cfg.p_mask = c.at("p_mask").get<double>();
  lg.gen.cfg.gumbel_temp = c.at("gumbel_temp").get<double>();
  lg.gen.cfg.tau = c.at("tau").get<double>();
  lg.gen.cfg.triggers_per_victim = c.at("triggers_per_victim").get<int>();
  lg.gen.cfg.use_adain = c.at("use_adain").get<bool>();
  lg.gen.cfg.adain_eps = c.at("adain_eps").get<double>();
  lg.gen.victim_dim = doc.at("victim_dim").get<int>();
  lg.gen.trigger_dim = doc.at("trigger_dim").get<int>();
  lg.gen.aux_types = doc.at("aux_types").get<std::vector<TypeId>>();
  lg.gen.aux_dims = doc.at("aux_dims").get<std::vector<int>>();
  lg.gen.key.resize(lg.gen.aux_types.size());
  auto names = lg.gen.param_names();
  auto tensors = lg.gen.params();
  const json& params = doc.at("params");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!params.contains(names[i]))
      throw SchemaError("load_generator_json: missing parameter '" + names[i] + "'");
    *tensors[i] = tensor_from_json(params.at(names[i]));
  }
  const json& st = doc.at("adain");
  lg.stats.mu = tensor_from_json(st.at("mu"));
  lg.stats.sigma = tensor_from_json(st.at("sigma"));
  lg.stats.eps = st.at("eps").get<double>();
  return lg;
}

}  // namespace hgl
