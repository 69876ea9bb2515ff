#include "hgl/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <utility>

namespace hgl {
namespace {

std::int64_t node_key(int layer, TypeId t, NodeId n) {
  return (static_cast<std::int64_t>(layer) << 40) | (static_cast<std::int64_t>(t) << 32) |
         static_cast<std::int64_t>(static_cast<std::uint32_t>(n));
}

}  // namespace

PoisonedForward::PoisonedForward(Tape& tape, const RelationalClassifier& frozen,
                                 const HeteroGraph& g, const SchemaRoles& roles,
                                 const ForwardActivations& clean, const CandidatePool& pool,
                                 const std::vector<TriggerSpec>& triggers)
    : tape_(tape),
      model_(frozen),
      g_(g),
      roles_(roles),
      clean_(clean),
      pool_(pool),
      triggers_(triggers) {
  if (!model_.matches_schema(g))
    throw SchemaError("PoisonedForward: classifier/graph schema mismatch");
  if (clean_.hidden.size() != static_cast<std::size_t>(model_.cfg.layers) + 1)
    throw ShapeError("PoisonedForward: clean activations do not cover every layer");

  for (TypeId t = 0; t < g.num_types(); ++t) {
    proj_w_.push_back(tape_.constant(model_.proj_w[static_cast<std::size_t>(t)]));
    proj_b_.push_back(tape_.constant(model_.proj_b[static_cast<std::size_t>(t)]));
  }
  for (int l = 0; l < model_.cfg.layers; ++l) {
    self_w_.push_back(tape_.constant(model_.self_w[static_cast<std::size_t>(l)]));
    std::vector<Var> cw;
    for (const auto& w : model_.chan_w[static_cast<std::size_t>(l)])
      cw.push_back(tape_.constant(w));
    chan_w_.push_back(std::move(cw));
  }
  head_w_ = tape_.constant(model_.head_w);
  head_b_ = tape_.constant(model_.head_b);

  base_trigger_ = g.num_nodes(roles_.trigger);
  aux_slot_.assign(static_cast<std::size_t>(g.num_types()),
                   std::numeric_limits<std::size_t>::max());
  for (std::size_t a = 0; a < roles_.auxiliary.size(); ++a) {
    aux_slot_[static_cast<std::size_t>(roles_.auxiliary[a])] = a;
    const auto& members = pool_.for_type(roles_.auxiliary[a]).members;
    if (!std::is_sorted(members.begin(), members.end()))
      throw SchemaError("PoisonedForward: pool members must be in ascending id order");
  }
  added_in_.resize(static_cast<std::size_t>(g.num_relations()));
  added_out_.resize(static_cast<std::size_t>(g.num_relations()));
  trig_side_.resize(static_cast<std::size_t>(g.num_relations()));

  int vf = g.find_relation(roles_.primary, roles_.trigger);
  int vr = g.find_relation(roles_.trigger, roles_.primary);
  if (vf < 0 && vr < 0)
    throw SchemaError("PoisonedForward: no relation joins the primary and trigger types");
  for (std::size_t i = 0; i < triggers_.size(); ++i) {
    int ti = static_cast<int>(i);
    NodeId victim = triggers_[i].victim;
    if (victim < 0 || victim >= g.num_nodes(roles_.primary))
      throw ShapeError("PoisonedForward: victim id out of range");
    if (vf >= 0) {
      trig_side_[static_cast<std::size_t>(vf)].victim_in = true;
      added_out_[static_cast<std::size_t>(vf)][victim].push_back({ti, -1, -1});
    } else {
      trig_side_[static_cast<std::size_t>(vr)].victim_out = true;
      added_in_[static_cast<std::size_t>(vr)][victim].push_back({ti, -1, -1});
    }
  }
  for (std::size_t a = 0; a < roles_.auxiliary.size(); ++a) {
    TypeId aux = roles_.auxiliary[a];
    bool any = false;
    for (const auto& spec : triggers_)
      if (a < spec.selection.size() && spec.selection[a].valid()) any = true;
    if (!any) continue;
    int fa = g.find_relation(roles_.trigger, aux);
    int ra = g.find_relation(aux, roles_.trigger);
    if (fa < 0 && ra < 0)
      throw SchemaError("PoisonedForward: no relation joins the trigger type and '" +
                        g.type_name(aux) + "'");
    const auto& members = pool_.for_type(aux).members;
    for (std::size_t i = 0; i < triggers_.size(); ++i) {
      const auto& spec = triggers_[i];
      if (a >= spec.selection.size() || !spec.selection[a].valid()) continue;
      for (int pos : spec.pool_pos[a]) {
        NodeId m = members.at(static_cast<std::size_t>(pos));
        AddedLink link{static_cast<int>(i), static_cast<int>(a), pos};
        if (fa >= 0)
          added_in_[static_cast<std::size_t>(fa)][m].push_back(link);
        else
          added_out_[static_cast<std::size_t>(ra)][m].push_back(link);
      }
    }
    if (fa >= 0)
      trig_side_[static_cast<std::size_t>(fa)].aux_out = static_cast<int>(a);
    else
      trig_side_[static_cast<std::size_t>(ra)].aux_in = static_cast<int>(a);
  }
  for (const TriggerSide& side : trig_side_)
    if ((side.victim_in && side.aux_in >= 0) || (side.victim_out && side.aux_out >= 0))
      throw SchemaError(
          "PoisonedForward: victim links and pool links would share one relation channel; "
          "add a dedicated relation for one of them");
}

Var PoisonedForward::clean_row(int layer, TypeId t, NodeId n) {
  std::int64_t key = node_key(layer, t, n);
  auto it = clean_memo_.find(key);
  if (it != clean_memo_.end()) return it->second;
  const Tensor& h = clean_.hidden[static_cast<std::size_t>(layer)][static_cast<std::size_t>(t)];
  Tensor row(1, h.cols());
  std::copy_n(h.row_ptr(static_cast<std::size_t>(n)), h.cols(), row.row_ptr(0));
  Var v = tape_.constant(row);
  clean_memo_.emplace(key, v);
  return v;
}

Tensor PoisonedForward::clean_mean(int prev_layer, TypeId src_t,
                                   const std::vector<int>& list) const {
  const Tensor& h =
      clean_.hidden[static_cast<std::size_t>(prev_layer)][static_cast<std::size_t>(src_t)];
  Tensor out(1, h.cols());
  if (list.empty()) return out;
  for (int u : list) {
    const double* r = h.row_ptr(static_cast<std::size_t>(u));
    for (std::size_t j = 0; j < h.cols(); ++j) out.data[j] += r[j];
  }
  double inv = 1.0 / static_cast<double>(list.size());
  for (std::size_t j = 0; j < h.cols(); ++j) out.data[j] *= inv;
  return out;
}

Var PoisonedForward::weight_var(int trig, int aux_index, int pool_pos) {
  std::int64_t key = (static_cast<std::int64_t>(trig) << 32) |
                     (static_cast<std::int64_t>(aux_index) << 24) |
                     static_cast<std::int64_t>(pool_pos);
  auto it = weight_memo_.find(key);
  if (it != weight_memo_.end()) return it->second;
  Var sel = triggers_[static_cast<std::size_t>(trig)].selection[static_cast<std::size_t>(
      aux_index)];
  Var w = tape_.select_cols(sel, static_cast<std::size_t>(pool_pos), 1);
  weight_memo_.emplace(key, w);
  return w;
}

Var PoisonedForward::assembled_pool(int prev_layer, std::size_t aux_index) {
  std::int64_t key = (static_cast<std::int64_t>(prev_layer) << 8) |
                     static_cast<std::int64_t>(aux_index);
  auto it = pool_memo_.find(key);
  if (it != pool_memo_.end()) return it->second;
  TypeId aux = roles_.auxiliary[aux_index];
  const auto& members = pool_.for_type(aux).members;
  const Tensor& h =
      clean_.hidden[static_cast<std::size_t>(prev_layer)][static_cast<std::size_t>(aux)];
  std::vector<Var> parts;
  Tensor block(0, h.cols());
  auto flush = [&]() {
    if (block.rows() == 0) return;
    parts.push_back(tape_.constant(block));
    block = Tensor(0, h.cols());
  };
  for (NodeId m : members) {
    NodeState st = corrected(prev_layer, aux, m);
    if (st.affected) {
      flush();
      parts.push_back(st.var);
    } else {
      std::size_t r = block.rows();
      block.n_rows += 1;
      block.data.resize(block.n_rows * block.n_cols);
      std::copy_n(h.row_ptr(static_cast<std::size_t>(m)), h.cols(), block.row_ptr(r));
    }
  }
  flush();
  Var v = parts.size() == 1 ? parts[0] : tape_.concat_rows(parts);
  pool_memo_.emplace(key, v);
  return v;
}

Var PoisonedForward::channel_aggregate(int prev_layer, int rel, bool incoming, NodeId n) {
  const Relation& r = g_.relation(rel);
  TypeId src_t = incoming ? r.src : r.dst;
  const auto& lists = incoming ? g_.in_adjacency(rel) : g_.out_adjacency(rel);
  const std::vector<int>& old_list = lists[static_cast<std::size_t>(n)];
  const auto& added_map = incoming ? added_in_[static_cast<std::size_t>(rel)]
                                   : added_out_[static_cast<std::size_t>(rel)];
  auto ait = added_map.find(n);
  const std::vector<AddedLink>* added = (ait == added_map.end()) ? nullptr : &ait->second;

  bool any_affected = false;
  for (int u : old_list)
    if (corrected(prev_layer, src_t, u).affected) {
      any_affected = true;
      break;
    }
  if (!added && !any_affected) return tape_.constant(clean_mean(prev_layer, src_t, old_list));

  // Rebuild the mean with the plain forward's exact summation order: old
  // neighbors in adjacency order, then appended links in trigger-id order.
  const Tensor& h_clean =
      clean_.hidden[static_cast<std::size_t>(prev_layer)][static_cast<std::size_t>(src_t)];
  Var acc;
  Tensor prefix(1, h_clean.cols());
  bool prefix_open = true;
  std::size_t prefix_len = 0;
  auto append = [&](Var row) {
    if (!acc.valid()) {
      if (prefix_len > 0)
        acc = tape_.add(tape_.constant(prefix), row);
      else
        acc = row;
    } else {
      acc = tape_.add(acc, row);
    }
  };
  for (int u : old_list) {
    NodeState st = corrected(prev_layer, src_t, u);
    if (!st.affected && prefix_open && !acc.valid()) {
      const double* rp = h_clean.row_ptr(static_cast<std::size_t>(u));
      for (std::size_t j = 0; j < h_clean.cols(); ++j) prefix.data[j] += rp[j];
      ++prefix_len;
      continue;
    }
    prefix_open = false;
    append(st.affected ? st.var : clean_row(prev_layer, src_t, u));
  }

  int uncond = 0;
  bool weighted = false;
  if (added) {
    for (const AddedLink& link : *added) {
      Var h_trig = corrected(prev_layer, roles_.trigger, base_trigger_ + link.trig).var;
      if (link.aux_index < 0) {
        append(h_trig);
        ++uncond;
      } else {
        append(tape_.mul(h_trig, weight_var(link.trig, link.aux_index, link.pool_pos)));
        weighted = true;
      }
    }
  }
  std::size_t base_count = old_list.size() + static_cast<std::size_t>(uncond);
  if (!acc.valid()) {
    // Every neighbor was clean (all collapsed into the prefix) but the node
    // was flagged affected: only possible with weighted links, handled above.
    acc = tape_.constant(prefix);
  }
  if (weighted) {
    Var denom = tape_.constant(Tensor::scalar(static_cast<double>(base_count)));
    for (const AddedLink& link : *added)
      if (link.aux_index >= 0)
        denom = tape_.add(denom, weight_var(link.trig, link.aux_index, link.pool_pos));
    Var recip = tape_.div(tape_.constant(Tensor::scalar(1.0)), denom);
    return tape_.mul(acc, recip);
  }
  if (base_count == 0) return tape_.constant(Tensor(1, h_clean.cols()));
  return tape_.scale(acc, 1.0 / static_cast<double>(base_count));
}

Var PoisonedForward::trig_channel_aggregate(int prev_layer, int rel, bool incoming, int trig) {
  const TriggerSide& side = trig_side_[static_cast<std::size_t>(rel)];
  const TriggerSpec& spec = triggers_[static_cast<std::size_t>(trig)];
  bool victim_link = incoming ? side.victim_in : side.victim_out;
  int aux = incoming ? side.aux_in : side.aux_out;
  std::size_t width = clean_.hidden[0][0].cols();
  if (victim_link) {
    // Single-neighbor list: the mean of one row is that row (scaling by 1/1
    // is exact).
    NodeState st = corrected(prev_layer, roles_.primary, spec.victim);
    return st.affected ? st.var : clean_row(prev_layer, roles_.primary, spec.victim);
  }
  if (aux >= 0 && static_cast<std::size_t>(aux) < spec.selection.size() &&
      spec.selection[static_cast<std::size_t>(aux)].valid()) {
    Var sel = spec.selection[static_cast<std::size_t>(aux)];
    Var rows = assembled_pool(prev_layer, static_cast<std::size_t>(aux));
    Var sum = tape_.rows_weighted_sum(rows, sel);
    Var denom = tape_.sum_all(sel);
    Var recip = tape_.div(tape_.constant(Tensor::scalar(1.0)), denom);
    return tape_.mul(sum, recip);
  }
  return tape_.constant(Tensor(1, width));  // no links in this channel
}

Var PoisonedForward::trigger_pre(int layer, int trig) {
  int lw = layer - 1;
  NodeState prev = corrected(lw, roles_.trigger, base_trigger_ + trig);
  Var pre = tape_.matmul_nt(prev.var, self_w_[static_cast<std::size_t>(lw)]);
  for (int r = 0; r < g_.num_relations(); ++r) {
    const Relation& rel = g_.relation(r);
    if (rel.dst == roles_.trigger) {
      Var agg = trig_channel_aggregate(lw, r, /*incoming=*/true, trig);
      pre = tape_.add(pre, tape_.matmul_nt(
                              agg, chan_w_[static_cast<std::size_t>(lw)]
                                          [static_cast<std::size_t>(2 * r)]));
    }
    if (rel.src == roles_.trigger) {
      Var agg = trig_channel_aggregate(lw, r, /*incoming=*/false, trig);
      pre = tape_.add(pre, tape_.matmul_nt(
                              agg, chan_w_[static_cast<std::size_t>(lw)]
                                          [static_cast<std::size_t>(2 * r + 1)]));
    }
  }
  return pre;
}

Var PoisonedForward::existing_pre(int layer, TypeId t, NodeId n) {
  int lw = layer - 1;
  NodeState prev = corrected(lw, t, n);
  Var h_self = prev.affected ? prev.var : clean_row(lw, t, n);
  Var pre = tape_.matmul_nt(h_self, self_w_[static_cast<std::size_t>(lw)]);
  for (int r = 0; r < g_.num_relations(); ++r) {
    const Relation& rel = g_.relation(r);
    if (rel.dst == t) {
      Var agg = channel_aggregate(lw, r, /*incoming=*/true, n);
      pre = tape_.add(pre, tape_.matmul_nt(
                              agg, chan_w_[static_cast<std::size_t>(lw)]
                                          [static_cast<std::size_t>(2 * r)]));
    }
    if (rel.src == t) {
      Var agg = channel_aggregate(lw, r, /*incoming=*/false, n);
      pre = tape_.add(pre, tape_.matmul_nt(
                              agg, chan_w_[static_cast<std::size_t>(lw)]
                                          [static_cast<std::size_t>(2 * r + 1)]));
    }
  }
  return pre;
}

PoisonedForward::NodeState PoisonedForward::corrected(int layer, TypeId t, NodeId n) {
  std::int64_t key = node_key(layer, t, n);
  auto it = memo_.find(key);
  if (it != memo_.end()) return it->second;

  NodeState st;
  bool is_new = (t == roles_.trigger && n >= base_trigger_);
  if (layer == 0) {
    if (is_new) {
      int trig = n - base_trigger_;
      Var feat = triggers_[static_cast<std::size_t>(trig)].feature;
      st.affected = true;
      st.var = tape_.add(tape_.matmul_nt(feat, proj_w_[static_cast<std::size_t>(t)]),
                         proj_b_[static_cast<std::size_t>(t)]);
    }
    memo_.emplace(key, st);
    return st;
  }

  if (is_new) {
    st.affected = true;
    st.var = tape_.gelu(tape_.layer_norm(trigger_pre(layer, n - base_trigger_)));
    memo_.emplace(key, st);
    return st;
  }

  bool changed = false;
  for (int r = 0; r < g_.num_relations() && !changed; ++r) {
    const Relation& rel = g_.relation(r);
    if (rel.dst == t && added_in_[static_cast<std::size_t>(r)].count(n)) changed = true;
    if (rel.src == t && added_out_[static_cast<std::size_t>(r)].count(n)) changed = true;
  }
  bool affected = changed || corrected(layer - 1, t, n).affected;
  for (int r = 0; r < g_.num_relations() && !affected; ++r) {
    const Relation& rel = g_.relation(r);
    if (rel.dst == t) {
      for (int u : g_.in_adjacency(r)[static_cast<std::size_t>(n)])
        if (corrected(layer - 1, rel.src, u).affected) {
          affected = true;
          break;
        }
    }
    if (rel.src == t && !affected) {
      for (int u : g_.out_adjacency(r)[static_cast<std::size_t>(n)])
        if (corrected(layer - 1, rel.dst, u).affected) {
          affected = true;
          break;
        }
    }
  }
  if (affected) {
    st.affected = true;
    st.var = tape_.gelu(tape_.layer_norm(existing_pre(layer, t, n)));
  }
  memo_.emplace(key, st);
  return st;
}

Var PoisonedForward::logits_row(NodeId v) {
  if (v < 0 || v >= g_.num_nodes(roles_.primary))
    throw ShapeError("PoisonedForward: primary node id out of range");
  NodeState st = corrected(model_.cfg.layers, roles_.primary, v);
  if (!st.affected) {
    Tensor row(1, clean_.logits.cols());
    std::copy_n(clean_.logits.row_ptr(static_cast<std::size_t>(v)), clean_.logits.cols(),
                row.row_ptr(0));
    return tape_.constant(row);
  }
  return tape_.add(tape_.matmul_nt(st.var, head_w_), head_b_);
}

Var PoisonedForward::logits_rows(const std::vector<NodeId>& nodes) {
  if (nodes.empty()) throw ShapeError("PoisonedForward: empty node list");
  std::vector<Var> rows;
  rows.reserve(nodes.size());
  for (NodeId v : nodes) rows.push_back(logits_row(v));
  return rows.size() == 1 ? rows[0] : tape_.concat_rows(rows);
}

namespace {

void validate_bilevel(const BilevelConfig& cfg, const SchemaRoles& roles,
                      const AttackTargets& targets) {
  std::vector<std::string> bad;
  if (cfg.iterations < 0) bad.push_back("iterations must be non-negative");
  if (cfg.inner_steps < 0) bad.push_back("inner_steps must be non-negative");
  if (cfg.victim_batch < 1) bad.push_back("victim_batch must be positive");
  if (cfg.lambda_div < 0.0) bad.push_back("lambda_div must be non-negative");
  if (targets.train.empty()) bad.push_back("train split is empty");
  if (targets.poison_train.empty()) bad.push_back("poison set is empty");
  if (roles.target_class < 0 || roles.target_class >= roles.num_classes)
    bad.push_back("target class out of range");
  std::set<NodeId> train_set(targets.train.begin(), targets.train.end());
  for (NodeId v : targets.poison_train)
    if (!train_set.count(v)) {
      bad.push_back("poison victims must be drawn from the train split");
      break;
    }
  if (!bad.empty()) {
    std::string msg = "run_bilevel configuration invalid:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
}

std::string csv_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

BilevelResult run_bilevel(const RelationalClassifier& surrogate0, const TriggerGenerator& gen0,
                          const HeteroGraph& g, const SchemaRoles& roles,
                          const CandidatePool& pool, const AttackTargets& targets,
                          const AdaINStats& stats, const BilevelConfig& cfg, Rng& rng) {
  validate_bilevel(cfg, roles, targets);

  BilevelResult res;
  res.surrogate = surrogate0;
  res.generator = gen0;
  AdamW surrogate_opt(cfg.surrogate_opt);
  AdamW generator_opt(cfg.generator_opt);

  Rng noise_rng = rng.substream("bilevel.noise");
  Rng gumbel_rng = rng.substream("bilevel.gumbel");
  Rng mask_rng = rng.substream("bilevel.mask");
  Rng batch_rng = rng.substream("bilevel.batch");

  // Training labels with every poison victim relabeled to the target class.
  std::vector<int> poisoned_labels = roles.labels;
  for (NodeId v : targets.poison_train)
    poisoned_labels[static_cast<std::size_t>(v)] = roles.target_class;
  std::vector<int> train_labels;
  train_labels.reserve(targets.train.size());
  for (NodeId v : targets.train)
    train_labels.push_back(poisoned_labels[static_cast<std::size_t>(v)]);

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw ConfigError("run_bilevel: cannot open log '" + cfg.log_path + "'");
    log << "iteration,surrogate_loss,generator_loss,diversity_loss,train_asr\n";
  }

  int n_poison = static_cast<int>(targets.poison_train.size());
  int batch_size = std::min(cfg.victim_batch, n_poison);

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    try {
      BilevelIterStats row;
      row.iteration = iter;

      // Inner phase: surrogate updates on freshly generated triggers.
      double inner_sum = 0.0;
      for (int step = 0; step < cfg.inner_steps; ++step) {
        GenerationResult gr = generate_delta(
            res.generator, g, roles, pool, targets.poison_train, stats, nullptr, nullptr,
            noise_rng, gumbel_rng, mask_rng, SelectMode::kTrain, &res.warnings);
        HeteroGraph poisoned = apply_delta(g, roles, gr.delta);
        Tape tape;
        TapeForwardOptions opt;
        opt.params_as_inputs = true;
        TapeForward tf = build_forward(tape, res.surrogate, poisoned, opt);
        Var picked = tape.select_rows(tf.logits, targets.train);
        Var loss = tape.scale(tape.cross_entropy(picked, train_labels),
                              1.0 / static_cast<double>(targets.train.size()));
        tape.backward(loss);
        inner_sum += tape.val(loss).data[0];
        std::vector<Tensor*> params = res.surrogate.params();
        std::vector<const Tensor*> grads;
        grads.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
          grads.push_back(&tape.grad(tf.param_vars[i]));
        surrogate_opt.step(params, grads);
      }
      row.surrogate_loss = inner_sum / static_cast<double>(cfg.inner_steps);

      // Outer phase: one generator update against the frozen surrogate.
      std::vector<Tensor> frozen_snapshot;
      for (const Tensor* p : const_cast<const RelationalClassifier&>(res.surrogate).params())
        frozen_snapshot.push_back(*p);

      std::vector<NodeId> batch;
      for (int idx : batch_rng.sample_without_replacement(n_poison, batch_size))
        batch.push_back(targets.poison_train[static_cast<std::size_t>(idx)]);

      ForwardActivations clean = forward_activations(res.surrogate, g);
      Tape tape;
      GenVars gv = lift_generator(tape, res.generator, /*as_inputs=*/true);
      GenerationTape gt =
          generate_on_tape(tape, res.generator, gv, g, roles, pool, batch, stats, nullptr,
                           nullptr, noise_rng, gumbel_rng, mask_rng, SelectMode::kTrain,
                           &res.warnings);
      PoisonedForward pf(tape, res.surrogate, g, roles, clean, pool, gt.triggers);
      Var logits = pf.logits_rows(batch);
      Var attack = tape.scale(
          tape.cross_entropy(logits, std::vector<int>(batch.size(), roles.target_class)),
          1.0 / static_cast<double>(batch.size()));
      std::vector<std::vector<Var>> sel_per_aux(roles.auxiliary.size());
      for (const auto& spec : gt.triggers)
        for (std::size_t a = 0; a < spec.selection.size(); ++a)
          sel_per_aux[a].push_back(spec.selection[a]);
      Var div = diversity_loss(tape, sel_per_aux, res.generator.cfg.tau, &res.warnings);
      Var loss =
          cfg.lambda_div > 0.0 ? tape.add(attack, tape.scale(div, cfg.lambda_div)) : attack;
      tape.backward(loss);
      row.generator_loss = tape.val(loss).data[0];
      row.diversity_loss = tape.val(div).data[0];

      std::vector<Tensor*> gparams = res.generator.params();
      std::vector<const Tensor*> ggrads;
      ggrads.reserve(gparams.size());
      for (std::size_t i = 0; i < gparams.size(); ++i)
        ggrads.push_back(&tape.grad(gv.flat[i]));
      generator_opt.step(gparams, ggrads);

      const Tensor& lv = tape.val(logits);
      int hits = 0;
      for (std::size_t i = 0; i < batch.size(); ++i)
        if (argmax_class(lv.row_ptr(i), res.surrogate.num_classes) == roles.target_class)
          ++hits;
      row.train_asr = static_cast<double>(hits) / static_cast<double>(batch.size());

      // The outer step must never move the surrogate.
      auto after = const_cast<const RelationalClassifier&>(res.surrogate).params();
      for (std::size_t i = 0; i < after.size(); ++i)
        if (!after[i]->bit_equal(frozen_snapshot[i]))
          throw std::logic_error("run_bilevel: generator step modified the surrogate");

      res.trace.push_back(row);
      if (log)
        log << row.iteration << ',' << csv_double(row.surrogate_loss) << ','
            << csv_double(row.generator_loss) << ',' << csv_double(row.diversity_loss) << ','
            << csv_double(row.train_asr) << '\n';
    } catch (const NumericFault& e) {
      if (!cfg.log_path.empty()) {
        save_classifier_json(cfg.log_path + ".fault-surrogate.json", res.surrogate);
        save_generator_json(cfg.log_path + ".fault-generator.json", res.generator, stats);
      }
      throw NumericFault("bilevel iteration " + std::to_string(iter) + ": " + e.what());
    }
  }
  return res;
}

}  // namespace hgl
