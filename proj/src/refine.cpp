#include "hgl/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace hgl {

Var affine_tape(Tape& tape, Var x, Var w, Var b) {
  const Tensor& xv = tape.val(x);
  const Tensor& wv = tape.val(w);
  const Tensor& bv = tape.val(b);
  if (wv.rows() != wv.cols() || wv.cols() != xv.cols())
    throw ShapeError("affine_tape: w must be square with x's width, got " + wv.shape_str());
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw ShapeError("affine_tape: b must be {1, width}, got " + bv.shape_str());
  return tape.add(tape.matmul_nt(x, w), b);
}

std::vector<double> median_bandwidths(const Tensor& x, const Tensor& y,
                                      const std::vector<double>& scales) {
  if (x.cols() != y.cols())
    throw ShapeError("median_bandwidths: width mismatch " + x.shape_str() + " vs " +
                     y.shape_str());
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < x.rows(); ++i) rows.push_back(x.row_ptr(i));
  for (std::size_t i = 0; i < y.rows(); ++i) rows.push_back(y.row_ptr(i));
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      dists.push_back(std::sqrt(sq_dist(rows[i], rows[j], x.cols())));
  double median = 0.0;
  if (!dists.empty()) {
    std::sort(dists.begin(), dists.end());
    std::size_t n = dists.size();
    median = (n % 2 == 1) ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
  }
  if (median <= 0.0) median = 1.0;
  std::vector<double> out;
  for (double s : scales) out.push_back(s * median);
  return out;
}

Var mmd_tape(Tape& tape, Var x, Var y, const std::vector<double>& gammas) {
  Var kxx = tape.gaussian_rbf(x, x, gammas);
  Var kyy = tape.gaussian_rbf(y, y, gammas);
  Var kxy = tape.gaussian_rbf(x, y, gammas);
  return tape.sub(tape.add(tape.mean_all(kxx), tape.mean_all(kyy)),
                  tape.scale(tape.mean_all(kxy), 2.0));
}

namespace {

double power_iteration(const Tensor& a, int iterations) {
  std::size_t d = a.rows();
  std::vector<double> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i);
  double norm = l2_norm(v.data(), d);
  for (auto& x : v) x /= norm;
  std::vector<double> u(d);
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < d; ++i) u[i] = dot(a.row_ptr(i), v.data(), d);
    double n = l2_norm(u.data(), d);
    if (n == 0.0) return 0.0;
    for (std::size_t i = 0; i < d; ++i) v[i] = u[i] / n;
  }
  for (std::size_t i = 0; i < d; ++i) u[i] = dot(a.row_ptr(i), v.data(), d);
  return dot(v.data(), u.data(), d);  // Rayleigh quotient
}

}  // namespace

double condition_estimate(const Tensor& w, int iterations) {
  if (w.rows() != w.cols() || w.rows() == 0)
    throw ShapeError("condition_estimate: square matrix required, got " + w.shape_str());
  std::size_t d = w.rows();
  Tensor a(d, d);  // w^T w
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += w.at(k, i) * w.at(k, j);
      a.at(i, j) = s;
    }
  double lmax = power_iteration(a, iterations);
  if (lmax <= 0.0) return std::numeric_limits<double>::infinity();
  Tensor b(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) b.at(i, j) = (i == j ? lmax : 0.0) - a.at(i, j);
  double mu = power_iteration(b, iterations);
  double lmin = lmax - mu;
  if (!(lmin > 0.0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(lmax / lmin);
}

namespace {

std::string csv_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

RefineResult run_refinement(const RelationalClassifier& surrogate, const TriggerGenerator& gen,
                            const HeteroGraph& g, const SchemaRoles& roles,
                            const CandidatePool& pool, const std::vector<NodeId>& victims,
                            const AdaINStats& stats, const RefineConfig& cfg, Rng& rng) {
  std::vector<std::string> bad;
  if (cfg.steps < 0) bad.push_back("steps must be non-negative");
  if (cfg.lambda_attack < 0.0) bad.push_back("lambda_attack must be non-negative");
  if (cfg.bandwidth_scales.empty()) bad.push_back("bandwidth_scales must be non-empty");
  for (double s : cfg.bandwidth_scales)
    if (s <= 0.0) {
      bad.push_back("bandwidth_scales must be positive");
      break;
    }
  if (cfg.mmd_reference != "clean" && cfg.mmd_reference != "raw")
    bad.push_back("mmd_reference must be \"clean\" or \"raw\"");
  if (victims.empty()) bad.push_back("victim list is empty");
  if (std::set<NodeId>(victims.begin(), victims.end()).size() != victims.size())
    bad.push_back("victim list has duplicates");
  if (!bad.empty()) {
    std::string msg = "run_refinement configuration invalid:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }

  RefineResult res;
  Rng noise_rng = rng.substream("refine.noise");
  Rng gumbel_rng = rng.substream("refine.gumbel");
  Rng mask_rng = rng.substream("refine.mask");

  // Fixed trigger set: noiseless generation, structure frozen for the whole
  // refinement.
  GenerationResult base =
      generate_delta(gen, g, roles, pool, victims, stats, nullptr, nullptr, noise_rng,
                     gumbel_rng, mask_rng, SelectMode::kInfer, &res.warnings);
  const Tensor& x = base.delta.new_features;
  const Tensor& y = cfg.mmd_reference == "clean" ? g.features(roles.trigger) : x;
  std::vector<double> gammas = median_bandwidths(x, y, cfg.bandwidth_scales);

  // mean(Kyy) never depends on the affine parameters; fold it in as a scalar
  // computed with the exact same kernel arithmetic.
  double mean_kyy;
  {
    Tape t;
    Var yv = t.constant(y);
    mean_kyy = t.val(t.mean_all(t.gaussian_rbf(yv, yv, gammas))).data[0];
  }

  ForwardActivations clean = forward_activations(surrogate, g);
  std::size_t n_trig = base.delta.victim_of.size();
  std::vector<int> target_labels(victims.size(), roles.target_class);

  AffineRefinement aff;
  aff.w = Tensor::identity(x.cols());
  aff.b = Tensor(1, x.cols());
  AdamW opt(cfg.optimizer);

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw ConfigError("run_refinement: cannot open log '" + cfg.log_path + "'");
    log << "step,mmd,attack,condition\n";
  }

  for (int step = 0; step <= cfg.steps; ++step) {
    Tape tape;
    Var wv = tape.input(aff.w);
    Var bv = tape.input(aff.b);
    Var x_aff = affine_tape(tape, tape.constant(x), wv, bv);
    Var kxx = tape.gaussian_rbf(x_aff, x_aff, gammas);
    Var kxy = tape.gaussian_rbf(x_aff, tape.constant(y), gammas);
    Var mmd = tape.sub(tape.add(tape.mean_all(kxx), tape.constant(Tensor::scalar(mean_kyy))),
                       tape.scale(tape.mean_all(kxy), 2.0));

    std::vector<TriggerSpec> specs(n_trig);
    for (std::size_t t = 0; t < n_trig; ++t) {
      TriggerSpec& spec = specs[t];
      spec.victim = base.delta.victim_of[t];
      spec.feature = tape.select_rows(x_aff, {static_cast<int>(t)});
      spec.selection.resize(roles.auxiliary.size());
      spec.hard_ids.resize(roles.auxiliary.size());
      spec.pool_pos.resize(roles.auxiliary.size());
      for (std::size_t a = 0; a < roles.auxiliary.size(); ++a) {
        const auto& pat = base.patterns[a][t];
        std::vector<int> pos;
        for (std::size_t p = 0; p < pat.size(); ++p)
          if (pat[p]) pos.push_back(static_cast<int>(p));
        if (pos.empty()) continue;  // type skipped at generation time
        Tensor sel_row(1, pat.size());
        for (int p : pos) sel_row.at(0, static_cast<std::size_t>(p)) = 1.0;
        spec.selection[a] = tape.constant(sel_row);
        spec.pool_pos[a] = pos;
        const auto& members = pool.for_type(roles.auxiliary[a]).members;
        for (int p : pos)
          spec.hard_ids[a].push_back(members[static_cast<std::size_t>(p)]);
      }
    }
    PoisonedForward pf(tape, surrogate, g, roles, clean, pool, specs);
    Var logits = pf.logits_rows(victims);
    Var attack = tape.scale(tape.cross_entropy(logits, target_labels),
                            1.0 / static_cast<double>(victims.size()));
    Var loss = cfg.lambda_attack > 0.0
                   ? tape.add(mmd, tape.scale(attack, cfg.lambda_attack))
                   : mmd;

    RefineStepStats row;
    row.step = step;
    row.mmd = tape.val(mmd).data[0];
    row.attack = tape.val(attack).data[0];
    row.condition = condition_estimate(aff.w);
    res.trace.push_back(row);
    if (log)
      log << row.step << ',' << csv_double(row.mmd) << ',' << csv_double(row.attack) << ','
          << csv_double(row.condition) << '\n';
    if (row.condition > 1e6)
      res.warnings.push_back("refinement: affine condition estimate exceeds 1e6 at step " +
                             std::to_string(step));
    if (step == cfg.steps) break;

    tape.backward(loss);
    std::vector<Tensor*> params = {&aff.w, &aff.b};
    std::vector<const Tensor*> grads = {&tape.grad(wv), &tape.grad(bv)};
    opt.step(params, grads);
  }

  res.affine = aff;
  return res;
}

}  // namespace hgl
