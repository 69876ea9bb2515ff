// Poisoned forward pass, alternating bi-level optimization, and the affine
// feature refinement (MMD + attack objective).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hgl/bilevel.hpp"
#include "hgl/candidates.hpp"
#include "hgl/classifier.hpp"
#include "hgl/metrics.hpp"
#include "hgl/refine.hpp"
#include "hgl/synth.hpp"

#include "test_util.hpp"

using namespace hgl;

namespace {

// Shared small pipeline state: synthetic graph, trained-ish surrogate, pool.
struct Setup {
  LoadedGraph lg;
  AttackTargets targets;
  RelationalClassifier model;
  CandidatePool pool;
  TriggerGenerator gen;
  AdaINStats stats;
};

Setup make_setup(unsigned seed, int epochs = 25) {
  SynthSpec spec = test_util::tiny_spec();
  Rng data_rng(seed);
  LoadedGraph lg = generate_synthetic(spec, data_rng.seed());
  SplitFractions fr;
  Rng split_rng(seed + 1);
  AttackTargets targets = split_targets(lg.graph.num_nodes(lg.roles.primary), lg.roles.labels,
                                        lg.roles.target_class, fr, split_rng);
  Rng init_rng(seed + 2);
  RelationalClassifier init =
      RelationalClassifier::init(lg.graph, lg.roles, ClassifierConfig{16, 2}, init_rng);
  TrainConfig tc;
  tc.epochs = epochs;
  RelationalClassifier model =
      train_clean(init, lg.graph, lg.roles.labels, targets.train, targets.val, tc).model;
  CandidatePool pool = build_pool(model, lg.graph, lg.roles, 6);
  GeneratorConfig gc;
  gc.noise_dim = 6;
  gc.heads = 2;
  gc.head_dim = 4;
  gc.hidden = 16;
  gc.triggers_per_victim = 1;
  Rng gen_rng(seed + 3);
  TriggerGenerator gen = TriggerGenerator::init(lg.graph, lg.roles, gc, gen_rng);
  AdaINStats stats =
      AdaINStats::from_features(lg.graph.features(lg.roles.trigger), gc.adain_eps);
  return Setup{std::move(lg), std::move(targets), std::move(model), std::move(pool),
               std::move(gen), std::move(stats)};
}

std::vector<Tensor> snapshot(const std::vector<const Tensor*>& params) {
  std::vector<Tensor> out;
  for (const Tensor* p : params) out.push_back(*p);
  return out;
}

bool bitwise_equal(const std::vector<Tensor>& a, const std::vector<const Tensor*>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].data != b[i]->data) return false;
  return true;
}

}  // namespace

TEST_CASE("poisoned forward with no triggers reproduces the clean logits bitwise") {
  Setup s = make_setup(40);
  ForwardActivations clean = forward_activations(s.model, s.lg.graph);
  Tape tape;
  std::vector<TriggerSpec> none;
  PoisonedForward pf(tape, s.model, s.lg.graph, s.lg.roles, clean, s.pool, none);
  for (NodeId v : {NodeId(0), NodeId(5), NodeId(17)}) {
    Tensor row = tape.val(pf.logits_row(v));
    for (std::size_t j = 0; j < row.cols(); ++j)
      CHECK(row.at(0, j) == clean.logits.at(static_cast<std::size_t>(v), j));
  }
}

TEST_CASE("poisoned forward on hard selections equals a from-scratch forward exactly") {
  Setup s = make_setup(41);
  ForwardActivations clean = forward_activations(s.model, s.lg.graph);
  std::vector<NodeId> victims(s.targets.poison_train.begin(),
                              s.targets.poison_train.begin() +
                                  std::min<std::size_t>(3, s.targets.poison_train.size()));
  REQUIRE(!victims.empty());

  Tape tape;
  GenVars vars = lift_generator(tape, s.gen, false);
  Rng n1(101), g1(102), m1(103);
  GenerationTape gt =
      generate_on_tape(tape, s.gen, vars, s.lg.graph, s.lg.roles, s.pool, victims, s.stats,
                       nullptr, nullptr, n1, g1, m1, SelectMode::kInfer, nullptr);
  PoisonedForward pf(tape, s.model, s.lg.graph, s.lg.roles, clean, s.pool, gt.triggers);
  Tensor on_tape = tape.val(pf.logits_rows(victims));

  Rng n2(101), g2(102), m2(103);
  GenerationResult res =
      generate_delta(s.gen, s.lg.graph, s.lg.roles, s.pool, victims, s.stats, nullptr, nullptr,
                     n2, g2, m2, SelectMode::kInfer, nullptr);
  HeteroGraph poisoned = apply_delta(s.lg.graph, s.lg.roles, res.delta);
  Tensor scratch = forward_logits(s.model, poisoned);

  REQUIRE(on_tape.rows() == victims.size());
  for (std::size_t i = 0; i < victims.size(); ++i)
    for (std::size_t j = 0; j < on_tape.cols(); ++j)
      CHECK(on_tape.at(i, j) ==
            scratch.at(static_cast<std::size_t>(victims[i]), j));  // exact, not approximate

  // A primary node far from every victim keeps its clean logits bitwise.
  NodeId far = 0;
  bool is_victim = false;
  for (NodeId v : victims) is_victim = is_victim || (v == far);
  if (!is_victim) {
    Tensor row = tape.val(pf.logits_row(far));
    Tensor clean_row(1, row.cols());
    for (std::size_t j = 0; j < row.cols(); ++j)
      clean_row.at(0, j) = clean.logits.at(static_cast<std::size_t>(far), j);
    // The node may sit inside a victim's two-hop halo; only assert bitwise
    // equality when the from-scratch forward says it is genuinely unaffected.
    bool scratch_same = true;
    for (std::size_t j = 0; j < row.cols(); ++j)
      scratch_same =
          scratch_same && (scratch.at(static_cast<std::size_t>(far), j) == clean_row.at(0, j));
    if (scratch_same)
      for (std::size_t j = 0; j < row.cols(); ++j) CHECK(row.at(0, j) == clean_row.at(0, j));
  }
}

TEST_CASE("bi-level: zero iterations return the initial parameters bitwise") {
  Setup s = make_setup(42, 5);
  BilevelConfig bc;
  bc.iterations = 0;
  Rng rng(1);
  auto surrogate_before = snapshot(const_cast<const RelationalClassifier&>(s.model).params());
  auto gen_before = snapshot(const_cast<const TriggerGenerator&>(s.gen).params());
  BilevelResult res =
      run_bilevel(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, s.targets, s.stats, bc, rng);
  CHECK(res.trace.empty());
  CHECK(bitwise_equal(surrogate_before,
                      const_cast<const RelationalClassifier&>(res.surrogate).params()));
  CHECK(bitwise_equal(gen_before, const_cast<const TriggerGenerator&>(res.generator).params()));
}

TEST_CASE("bi-level: zero inner steps leave the surrogate untouched but move the generator") {
  Setup s = make_setup(43, 5);
  BilevelConfig bc;
  bc.iterations = 1;
  bc.inner_steps = 0;
  bc.victim_batch = 8;
  Rng rng(2);
  auto surrogate_before = snapshot(const_cast<const RelationalClassifier&>(s.model).params());
  auto gen_before = snapshot(const_cast<const TriggerGenerator&>(s.gen).params());
  BilevelResult res =
      run_bilevel(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, s.targets, s.stats, bc, rng);
  CHECK(bitwise_equal(surrogate_before,
                      const_cast<const RelationalClassifier&>(res.surrogate).params()));
  CHECK_FALSE(bitwise_equal(gen_before,
                            const_cast<const TriggerGenerator&>(res.generator).params()));
  CHECK(res.trace.size() == 1);
}

TEST_CASE("bi-level: deterministic under a fixed seed and does not mutate its inputs") {
  Setup s = make_setup(44, 10);
  BilevelConfig bc;
  bc.iterations = 3;
  bc.inner_steps = 2;
  bc.victim_batch = 8;
  auto surrogate_before = snapshot(const_cast<const RelationalClassifier&>(s.model).params());
  auto gen_before = snapshot(const_cast<const TriggerGenerator&>(s.gen).params());

  Rng r1(7);
  BilevelResult a =
      run_bilevel(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, s.targets, s.stats, bc, r1);
  Rng r2(7);
  BilevelResult b =
      run_bilevel(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, s.targets, s.stats, bc, r2);

  // Inputs unchanged.
  CHECK(bitwise_equal(surrogate_before, const_cast<const RelationalClassifier&>(s.model).params()));
  CHECK(bitwise_equal(gen_before, const_cast<const TriggerGenerator&>(s.gen).params()));
  // Identical traces and identical final parameters.
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].surrogate_loss == b.trace[i].surrogate_loss);
    CHECK(a.trace[i].generator_loss == b.trace[i].generator_loss);
    CHECK(a.trace[i].diversity_loss == b.trace[i].diversity_loss);
    CHECK(a.trace[i].train_asr == b.trace[i].train_asr);
  }
  auto pa = const_cast<const RelationalClassifier&>(a.surrogate).params();
  auto ga = const_cast<const TriggerGenerator&>(a.generator).params();
  auto pb = const_cast<const RelationalClassifier&>(b.surrogate).params();
  auto gb = const_cast<const TriggerGenerator&>(b.generator).params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);
  for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i]->data == gb[i]->data);
}

TEST_CASE("bi-level training drives the train-batch attack rate up") {
  Setup s = make_setup(45, 25);
  BilevelConfig bc;
  bc.iterations = 35;
  bc.inner_steps = 3;
  bc.victim_batch = 12;
  Rng rng(9);
  BilevelResult res =
      run_bilevel(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, s.targets, s.stats, bc, rng);
  REQUIRE(res.trace.size() == 35);
  double first = res.trace.front().train_asr;
  double last = res.trace.back().train_asr;
  CHECK(last >= first);
  CHECK(last >= 0.5);
  for (const auto& row : res.trace) {
    CHECK(std::isfinite(row.surrogate_loss));
    CHECK(std::isfinite(row.generator_loss));
    CHECK(row.train_asr >= 0.0);
    CHECK(row.train_asr <= 1.0);
  }
}

TEST_CASE("affine map on tape: identity, 2I+1, finite differences") {
  Rng rng(50);
  Tensor x = test_util::rand_tensor(4, 3, rng, 1.0);

  SUBCASE("identity") {
    Tape tape;
    Var out = affine_tape(tape, tape.constant(x), tape.constant(Tensor::identity(3)),
                          tape.constant(Tensor::zeros(1, 3)));
    Tensor v = tape.val(out);
    for (std::size_t i = 0; i < v.numel(); ++i) CHECK(v.data[i] == x.data[i]);
  }
  SUBCASE("2I + 1") {
    Tape tape;
    Tensor w = Tensor::identity(3);
    for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 2.0;
    Var out = affine_tape(tape, tape.constant(x), tape.constant(w),
                          tape.constant(Tensor::full(1, 3, 1.0)));
    Tensor v = tape.val(out);
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j)
        CHECK(v.at(i, j) == doctest::Approx(2.0 * x.at(i, j) + 1.0).epsilon(1e-15));
  }
  SUBCASE("gradient w.r.t. the weight matrix") {
    Tensor w0 = Tensor::identity(3);
    double err = grad_check(
        [&](Tape& tape, Var w) {
          Var out = affine_tape(tape, tape.constant(x), w,
                                tape.constant(Tensor::full(1, 3, 0.25)));
          Rng wr(51);
          return tape.sum_all(tape.mul(out, tape.constant(test_util::rand_tensor(4, 3, wr, 1.0))));
        },
        w0, 1e-6);
    CHECK(err <= 1e-6);
  }
}

TEST_CASE("median bandwidths: odd pooled count, zero degradation, scaling") {
  Tensor x(2, 1), y(1, 1);
  x.at(0, 0) = 0.0;
  x.at(1, 0) = 2.0;
  y.at(0, 0) = 4.0;
  // Pooled rows {0,2,4}: pairwise distances {2,4,2}, median 2.
  std::vector<double> bw = median_bandwidths(x, y, {0.5, 1.0, 2.0});
  REQUIRE(bw.size() == 3);
  CHECK(bw[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bw[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(bw[2] == doctest::Approx(4.0).epsilon(1e-12));

  Tensor same = Tensor::full(4, 2, 3.0);
  std::vector<double> flat = median_bandwidths(same, same, {0.5, 1.0});
  CHECK(flat[0] == doctest::Approx(0.5).epsilon(1e-12));  // zero median -> 1.0, then scaled
  CHECK(flat[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("MMD: self-zero, symmetry, one-point closed form, non-negativity, FD") {
  Rng rng(52);
  SUBCASE("identical samples give zero") {
    Tensor x = test_util::rand_tensor(20, 4, rng, 1.0);
    Tape tape;
    double v = tape.val(mmd_tape(tape, tape.constant(x), tape.constant(x), {0.7, 1.3}))
                   .at(0, 0);
    CHECK(std::abs(v) <= 1e-12);
  }
  SUBCASE("symmetric in its arguments") {
    Tensor x = test_util::rand_tensor(15, 3, rng, 1.0);
    Tensor y = test_util::rand_tensor(9, 3, rng, 1.5);
    Tape tape;
    double a = tape.val(mmd_tape(tape, tape.constant(x), tape.constant(y), {1.0})).at(0, 0);
    double b = tape.val(mmd_tape(tape, tape.constant(y), tape.constant(x), {1.0})).at(0, 0);
    CHECK(std::abs(a - b) <= 1e-12);
  }
  SUBCASE("single points: 2 - 2 exp(-d^2 / (2 sigma^2))") {
    Tensor u(1, 2), v(1, 2);
    u.at(0, 0) = 1.0;
    u.at(0, 1) = 2.0;
    v.at(0, 0) = -1.0;
    v.at(0, 1) = 0.5;
    double d2 = 4.0 + 2.25;
    double sigma = 1.7;
    Tape tape;
    double got = tape.val(mmd_tape(tape, tape.constant(u), tape.constant(v), {sigma})).at(0, 0);
    CHECK(got ==
          doctest::Approx(2.0 - 2.0 * std::exp(-d2 / (2.0 * sigma * sigma))).epsilon(1e-12));
  }
  SUBCASE("non-negative on random inputs") {
    for (int t = 0; t < 20; ++t) {
      Tensor x = test_util::rand_tensor(8, 3, rng, 2.0);
      Tensor y = test_util::rand_tensor(11, 3, rng, 0.5);
      Tape tape;
      double v =
          tape.val(mmd_tape(tape, tape.constant(x), tape.constant(y), {0.5, 1.0, 2.0})).at(0, 0);
      CHECK(v >= -1e-12);
    }
  }
  SUBCASE("two seeded draws from one distribution stay close") {
    Rng a(500), b(501);
    Tensor x = test_util::rand_tensor(300, 6, a, 1.0);
    Tensor y = test_util::rand_tensor(300, 6, b, 1.0);
    std::vector<double> bw = median_bandwidths(x, y, {0.5, 1.0, 2.0});
    Tape tape;
    double v = tape.val(mmd_tape(tape, tape.constant(x), tape.constant(y), bw)).at(0, 0);
    CHECK(v >= -1e-12);
    CHECK(v <= 0.01);
  }
  SUBCASE("gradient matches finite differences") {
    Tensor x = test_util::rand_tensor(5, 3, rng, 1.0);
    Tensor y = test_util::rand_tensor(6, 3, rng, 1.2);
    double err = grad_check(
        [&](Tape& tape, Var xv) { return mmd_tape(tape, xv, tape.constant(y), {0.8, 1.6}); },
        x, 1e-6);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("condition estimate: identity and diagonal matrices") {
  CHECK(condition_estimate(Tensor::identity(4)) == doctest::Approx(1.0).epsilon(1e-6));
  Tensor d = Tensor::zeros(2, 2);
  d.at(0, 0) = 3.0;
  d.at(1, 1) = 0.5;
  CHECK(condition_estimate(d) == doctest::Approx(6.0).epsilon(1e-3));
}

TEST_CASE("refinement: zero steps keep the identity and trace row 0 is the unrefined loss") {
  Setup s = make_setup(46, 15);
  // Zero every surrogate parameter: uniform logits make the attack loss ln(C).
  RelationalClassifier zeroed = s.model;
  for (Tensor* p : zeroed.params())
    for (double& x : p->data) x = 0.0;
  RefineConfig rc;
  rc.steps = 0;
  Rng rng(11);
  std::vector<NodeId> victims(s.targets.poison_train.begin(), s.targets.poison_train.end());
  RefineResult res = run_refinement(zeroed, s.gen, s.lg.graph, s.lg.roles, s.pool, victims,
                                    s.stats, rc, rng);
  REQUIRE(res.trace.size() == 1);
  CHECK(res.trace[0].attack == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  // Identity affine returned untouched.
  Tensor eye = Tensor::identity(static_cast<std::size_t>(res.affine.w.rows()));
  CHECK(res.affine.w.data == eye.data);
  for (double v : res.affine.b.data) CHECK(v == 0.0);
  CHECK(res.trace[0].condition == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("refinement descends its objective and never touches generator or surrogate") {
  Setup s = make_setup(47, 20);
  auto surrogate_before = snapshot(const_cast<const RelationalClassifier&>(s.model).params());
  auto gen_before = snapshot(const_cast<const TriggerGenerator&>(s.gen).params());
  RefineConfig rc;
  rc.steps = 25;
  rc.lambda_attack = 1.0;
  Rng rng(12);
  std::vector<NodeId> victims(s.targets.poison_train.begin(), s.targets.poison_train.end());
  RefineResult res = run_refinement(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, victims,
                                    s.stats, rc, rng);
  REQUIRE(res.trace.size() == 26);
  double first = res.trace.front().mmd + rc.lambda_attack * res.trace.front().attack;
  double last = res.trace.back().mmd + rc.lambda_attack * res.trace.back().attack;
  CHECK(last <= first + 1e-9);
  CHECK(bitwise_equal(surrogate_before,
                      const_cast<const RelationalClassifier&>(s.model).params()));
  CHECK(bitwise_equal(gen_before, const_cast<const TriggerGenerator&>(s.gen).params()));
}

TEST_CASE("refinement preserves the surrogate-measured attack rate within 0.05") {
  Setup s = make_setup(48, 25);
  // Give the generator some training so the unrefined attack works at all.
  BilevelConfig bc;
  bc.iterations = 12;
  bc.inner_steps = 3;
  bc.victim_batch = 12;
  Rng brng(13);
  BilevelResult trained =
      run_bilevel(s.model, s.gen, s.lg.graph, s.lg.roles, s.pool, s.targets, s.stats, bc, brng);

  RefineConfig rc;
  rc.steps = 40;
  Rng rrng(14);
  std::vector<NodeId> victims(s.targets.poison_train.begin(), s.targets.poison_train.end());
  RefineResult ref = run_refinement(trained.surrogate, trained.generator, s.lg.graph,
                                    s.lg.roles, s.pool, victims, s.stats, rc, rrng);

  // Wide victim set for a fine-grained rate: every non-target train node.
  std::vector<NodeId> wide;
  for (NodeId v : s.targets.train)
    if (s.lg.roles.labels[static_cast<std::size_t>(v)] != s.lg.roles.target_class)
      wide.push_back(v);
  REQUIRE(wide.size() >= 20);

  auto rate = [&](const Tensor* w, const Tensor* b) {
    Rng n(15), g(16), m(17);
    GenerationResult res = generate_delta(trained.generator, s.lg.graph, s.lg.roles, s.pool,
                                          wide, s.stats, w, b, n, g, m, SelectMode::kInfer,
                                          nullptr);
    HeteroGraph poisoned = apply_delta(s.lg.graph, s.lg.roles, res.delta);
    return asr(trained.surrogate, poisoned, wide, s.lg.roles.labels, s.lg.roles.target_class);
  };
  double raw = rate(nullptr, nullptr);
  double refined = rate(&ref.affine.w, &ref.affine.b);
  CHECK(refined >= raw - 0.05);
}
