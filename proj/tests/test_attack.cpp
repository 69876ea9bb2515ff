// Trigger generator primitives: feature synthesis, batch-statistics
// alignment, attention scoring, masking, differentiable top-k, edge
// construction, and the diversity penalty.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hgl/generator.hpp"
#include "hgl/graph.hpp"
#include "hgl/rng.hpp"

#include "test_util.hpp"

using namespace hgl;

namespace {

TriggerGenerator small_gen(const HeteroGraph& g, const SchemaRoles& roles, unsigned seed,
                           GeneratorConfig cfg = {}) {
  cfg.noise_dim = 4;
  cfg.heads = 2;
  cfg.head_dim = 3;
  cfg.hidden = 8;
  Rng rng(seed);
  return TriggerGenerator::init(g, roles, cfg, rng);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("gen_features: zeroed output layer emits zeros; equal victims get equal rows") {
  auto [g, roles] = test_util::path_graph();
  TriggerGenerator gen = small_gen(g, roles, 1);

  SUBCASE("zero final layer") {
    for (double& x : gen.fw3.data) x = 0.0;
    for (double& x : gen.fb3.data) x = 0.0;
    Tape tape;
    GenVars vars = lift_generator(tape, gen, false);
    Rng vr(2);
    Var victims = tape.constant(test_util::rand_tensor(3, 3, vr, 1.0));
    Tensor out = tape.val(gen_features(tape, gen, vars, victims));
    for (double v : out.data) CHECK(v == 0.0);
  }
  SUBCASE("same victim row twice") {
    Tape tape;
    GenVars vars = lift_generator(tape, gen, false);
    Tensor two(2, 3);
    for (std::size_t j = 0; j < 3; ++j) {
      two.at(0, j) = 0.3 * static_cast<double>(j + 1);
      two.at(1, j) = two.at(0, j);
    }
    Tensor out = tape.val(gen_features(tape, gen, vars, tape.constant(two)));
    REQUIRE(out.rows() == 2);
    for (std::size_t j = 0; j < out.cols(); ++j) CHECK(out.at(0, j) == out.at(1, j));
  }
  SUBCASE("finite differences through the feature MLP") {
    Rng vr(3);
    Tensor victims = test_util::rand_tensor(2, 3, vr, 1.0);
    auto eval = [&](const TriggerGenerator& gg) {
      Tape tape;
      GenVars vars = lift_generator(tape, gg, false);
      Var out = gen_features(tape, gg, vars, tape.constant(victims));
      Rng wr(7);
      Tensor w = test_util::rand_tensor(2, out.valid() ? tape.val(out).cols() : 0, wr, 1.0);
      return tape.val(tape.sum_all(tape.mul(out, tape.constant(w)))).at(0, 0);
    };
    // Analytic gradient of the same loss via the tape.
    Tape tape;
    GenVars vars = lift_generator(tape, gen, true);
    Var out = gen_features(tape, gen, vars, tape.constant(victims));
    Rng wr(7);
    Tensor w = test_util::rand_tensor(2, tape.val(out).cols(), wr, 1.0);
    Var loss = tape.sum_all(tape.mul(out, tape.constant(w)));
    tape.backward(loss);
    auto params = gen.params();
    auto names = gen.param_names();
    const double h = 1e-6;
    int checked = 0;
    for (std::size_t pi = 0; pi < params.size() && checked < 8; ++pi) {
      if (names[pi].rfind("f", 0) != 0) continue;  // feature-MLP tensors only
      Tensor analytic = tape.grad(vars.flat[pi]);
      std::size_t coord = params[pi]->numel() / 2;
      TriggerGenerator plus = gen, minus = gen;
      plus.params()[pi]->data[coord] += h;
      minus.params()[pi]->data[coord] -= h;
      double fd = (eval(plus) - eval(minus)) / (2.0 * h);
      double an = analytic.data[coord];
      if (std::abs(fd) < 1e-10 && std::abs(an) < 1e-10) continue;
      CHECK(test_util::rel_err(an, fd) <= 1e-4);
      ++checked;
    }
    CHECK(checked >= 4);
  }
}

TEST_CASE("adain matches hand-computed alignment and degenerate cases") {
  SUBCASE("two-point batch [0,2] onto mu=5 sigma=2 gives [3,7]") {
    AdaINStats stats;
    stats.mu = Tensor::full(1, 1, 5.0);
    stats.sigma = Tensor::full(1, 1, 2.0);
    Tape tape;
    Tensor batch(2, 1);
    batch.at(0, 0) = 0.0;
    batch.at(1, 0) = 2.0;
    Tensor out = tape.val(adain(tape, tape.constant(batch), stats));
    CHECK(out.at(0, 0) == doctest::Approx(3.0).epsilon(1e-7));
    CHECK(out.at(1, 0) == doctest::Approx(7.0).epsilon(1e-7));
  }
  SUBCASE("batch already matching the stats is a near fixed point") {
    Tensor clean(4, 2);
    double vals[4] = {-1.5, -0.5, 0.5, 1.5};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j) clean.at(i, j) = vals[i] * (j + 1.0);
    AdaINStats stats = AdaINStats::from_features(clean);
    Tape tape;
    Tensor out = tape.val(adain(tape, tape.constant(clean), stats));
    for (std::size_t i = 0; i < out.numel(); ++i)
      CHECK(out.data[i] == doctest::Approx(clean.data[i]).epsilon(1e-6));
  }
  SUBCASE("zero clean sigma collapses every row to the clean mean") {
    AdaINStats stats;
    stats.mu = Tensor::full(1, 2, 1.25);
    stats.sigma = Tensor::zeros(1, 2);
    Tape tape;
    Rng rng(4);
    Tensor out =
        tape.val(adain(tape, tape.constant(test_util::rand_tensor(5, 2, rng, 3.0)), stats));
    for (double v : out.data) CHECK(v == doctest::Approx(1.25).epsilon(1e-9));
  }
  SUBCASE("output batch statistics equal the clean statistics within 1e-6") {
    Rng rng(5);
    Tensor clean = test_util::rand_tensor(40, 6, rng, 2.0);
    AdaINStats stats = AdaINStats::from_features(clean);
    Tensor batch = test_util::rand_tensor(12, 6, rng, 5.0);
    Tape tape;
    Tensor out = tape.val(adain(tape, tape.constant(batch), stats));
    for (std::size_t j = 0; j < 6; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < out.rows(); ++i) mean += out.at(i, j);
      mean /= static_cast<double>(out.rows());
      double var = 0.0;
      for (std::size_t i = 0; i < out.rows(); ++i)
        var += (out.at(i, j) - mean) * (out.at(i, j) - mean);
      var /= static_cast<double>(out.rows());
      CHECK(std::abs(mean - stats.mu.at(0, j)) <= 1e-6);
      CHECK(std::abs(std::sqrt(var) - stats.sigma.at(0, j)) <= 1e-6);
    }
  }
  SUBCASE("single-row batch returns the clean mean and records a warning") {
    AdaINStats stats;
    stats.mu = Tensor::full(1, 3, 0.5);
    stats.sigma = Tensor::full(1, 3, 1.0);
    Tape tape;
    Warnings w;
    Tensor out = tape.val(adain(tape, tape.constant(Tensor::full(1, 3, 9.0)), stats, &w));
    for (double v : out.data) CHECK(v == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(!w.empty());
  }
  SUBCASE("finite differences through the alignment") {
    Rng rng(6);
    Tensor clean = test_util::rand_tensor(10, 3, rng, 1.5);
    AdaINStats stats = AdaINStats::from_features(clean);
    Tensor point = test_util::rand_tensor(5, 3, rng, 1.0);
    double err = grad_check(
        [&](Tape& tape, Var x) {
          Var out = adain(tape, x, stats);
          Rng wr(8);
          Tensor w = test_util::rand_tensor(5, 3, wr, 1.0);
          return tape.sum_all(tape.mul(out, tape.constant(w)));
        },
        point, 1e-6);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("attention logits: hand example, orthogonality, head averaging, bound") {
  SUBCASE("single head hand evaluation") {
    Tape tape;
    Tensor q(1, 2);
    q.at(0, 0) = 3.0;
    q.at(0, 1) = 4.0;
    Tensor k(2, 2);
    k.at(0, 0) = 1.0;  // -> dot 0.6 after normalizing q
    k.at(0, 1) = 0.0;
    k.at(1, 0) = 0.0;  // -> dot 0.8
    k.at(1, 1) = 2.0;
    Tensor out = tape.val(
        attention_logits(tape, {tape.constant(q)}, {tape.constant(k)}));
    REQUIRE(out.rows() == 1);
    REQUIRE(out.cols() == 2);
    CHECK(out.at(0, 0) == doctest::Approx(0.6 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(out.at(0, 1) == doctest::Approx(0.8 / std::sqrt(2.0)).epsilon(1e-12));
  }
  SUBCASE("orthogonal query and keys score zero") {
    Tape tape;
    Tensor q(1, 2);
    q.at(0, 0) = 2.0;
    q.at(0, 1) = 0.0;
    Tensor k(1, 2);
    k.at(0, 0) = 0.0;
    k.at(0, 1) = -3.0;
    Tensor out = tape.val(attention_logits(tape, {tape.constant(q)}, {tape.constant(k)}));
    CHECK(out.at(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("two heads average and the 1/sqrt(d) bound holds") {
    Rng rng(9);
    Tape tape;
    Tensor q1 = test_util::rand_tensor(1, 3, rng, 1.0);
    Tensor q2 = test_util::rand_tensor(1, 3, rng, 1.0);
    Tensor k1 = test_util::rand_tensor(7, 3, rng, 1.0);
    Tensor k2 = test_util::rand_tensor(7, 3, rng, 1.0);
    Tensor both = tape.val(attention_logits(
        tape, {tape.constant(q1), tape.constant(q2)}, {tape.constant(k1), tape.constant(k2)}));
    Tensor only1 = tape.val(attention_logits(tape, {tape.constant(q1)}, {tape.constant(k1)}));
    Tensor only2 = tape.val(attention_logits(tape, {tape.constant(q2)}, {tape.constant(k2)}));
    for (std::size_t j = 0; j < 7; ++j) {
      CHECK(both.at(0, j) ==
            doctest::Approx(0.5 * (only1.at(0, j) + only2.at(0, j))).epsilon(1e-12));
      CHECK(std::abs(both.at(0, j)) <= 1.0 / std::sqrt(3.0) + 1e-12);
    }
  }
}

TEST_CASE("connection logits respect the attention bound on a real generator") {
  auto [g, roles] = test_util::path_graph();
  TriggerGenerator gen = small_gen(g, roles, 10);
  Tape tape;
  GenVars vars = lift_generator(tape, gen, false);
  Rng rng(11);
  Tensor pool_feats = test_util::rand_tensor(5, 2, rng, 1.0);  // aux type A has dim 2
  std::vector<Var> keys = pool_key_heads(tape, gen, vars, 0, tape.constant(pool_feats));
  REQUIRE(static_cast<int>(keys.size()) == gen.cfg.heads);
  Tensor cond = test_util::rand_tensor(
      1, static_cast<std::size_t>(gen.victim_dim + gen.trigger_dim + gen.cfg.noise_dim), rng,
      1.0);
  Tensor logits = tape.val(connection_logits(tape, gen, vars, 0, tape.constant(cond), keys));
  REQUIRE(logits.rows() == 1);
  REQUIRE(logits.cols() == 5);
  for (double v : logits.data) CHECK(std::abs(v) <= 1.0 / std::sqrt(3.0) + 1e-12);
}

TEST_CASE("random mask: p=0 identity, exact-k pools exempt, frequency, min survivors") {
  Tape tape;
  Rng lr(12);
  Var logits = tape.constant(test_util::rand_tensor(1, 6, lr, 1.0));

  SUBCASE("p = 0 masks nothing") {
    Rng rng(13);
    MaskedLogits ml = random_mask(tape, logits, 0.0, 2, rng);
    for (auto m : ml.masked) CHECK(m == 0);
  }
  SUBCASE("pool exactly k is never masked") {
    Rng rng(14);
    Var small = tape.constant(Tensor::full(1, 3, 0.25));
    for (int t = 0; t < 200; ++t) {
      MaskedLogits ml = random_mask(tape, small, 0.9, 3, rng);
      for (auto m : ml.masked) CHECK(m == 0);
    }
  }
  SUBCASE("masked fraction approaches p") {
    Rng rng(15);
    Var wide = tape.constant(Tensor::full(1, 100, 0.0));
    int masked = 0, total = 0;
    for (int t = 0; t < 100; ++t) {
      MaskedLogits ml = random_mask(tape, wide, 0.5, 1, rng);
      for (auto m : ml.masked) masked += m ? 1 : 0;
      total += 100;
    }
    double frac = static_cast<double>(masked) / static_cast<double>(total);
    CHECK(std::abs(frac - 0.5) <= 0.02);
  }
  SUBCASE("at least k entries always survive") {
    Rng rng(16);
    Var six = tape.constant(Tensor::full(1, 6, 0.0));
    for (int t = 0; t < 500; ++t) {
      MaskedLogits ml = random_mask(tape, six, 0.8, 4, rng);
      int unmasked = 0;
      for (auto m : ml.masked) unmasked += m ? 0 : 1;
      CHECK(unmasked >= 4);
    }
  }
}

TEST_CASE("solve_shift: closed forms, residual bound, argsort selection oracle") {
  SUBCASE("all-zero logits with k = n/2 solve at t = 0 and tie to low indices") {
    TopkState st = solve_shift({0.0, 0.0, 0.0, 0.0}, 2);
    CHECK(std::abs(st.shift) <= 1e-9);
    CHECK(st.selection == std::vector<std::uint8_t>{1, 1, 0, 0});
  }
  SUBCASE("antisymmetric pair solves at t = 0") {
    for (double c : {0.3, 1.0, 4.0}) {
      TopkState st = solve_shift({-c, c}, 1);
      CHECK(std::abs(st.shift) <= 1e-9);
      CHECK(st.selection == std::vector<std::uint8_t>{0, 1});
    }
  }
  SUBCASE("1000 random instances: residual, positivity, argsort agreement") {
    Rng rng(17);
    for (int t = 0; t < 1000; ++t) {
      int n = 2 + rng.uniform_int(40);
      int k = 1 + rng.uniform_int(n - 1);
      std::vector<double> x(static_cast<std::size_t>(n));
      for (double& v : x) v = rng.normal() * 3.0;
      TopkState st = solve_shift(x, k);
      CHECK(std::abs(st.residual) <= 1e-8);
      double soft_sum = 0.0;
      for (double v : x) soft_sum += sigmoid(v + st.shift);
      CHECK(std::abs(soft_sum - k) <= 1e-8);
      for (double v : st.v) CHECK(v > 0.0);

      std::vector<int> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return x[static_cast<std::size_t>(a)] > x[static_cast<std::size_t>(b)];
      });
      std::vector<std::uint8_t> want(static_cast<std::size_t>(n), 0);
      for (int i = 0; i < k; ++i) want[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
      CHECK(st.selection == want);
      CHECK(std::accumulate(st.selection.begin(), st.selection.end(), 0) == k);
    }
  }
}

TEST_CASE("topk_select: forward selection, exact shift-invariance adjoint, soft-map FD") {
  Tape tape;
  Tensor l(1, 3);
  l.at(0, 0) = 3.0;
  l.at(0, 1) = 1.0;
  l.at(0, 2) = 2.0;

  SUBCASE("infer mode picks indices {0,2}") {
    MaskedLogits ml{tape.constant(l), std::vector<std::uint8_t>(3, 0)};
    Rng rng(18);
    Tensor sel = tape.val(topk_select(tape, ml, 2, 0.5, rng, SelectMode::kInfer));
    CHECK(sel.at(0, 0) == 1.0);
    CHECK(sel.at(0, 1) == 0.0);
    CHECK(sel.at(0, 2) == 1.0);
  }
  SUBCASE("upstream all-ones gives exactly zero logit gradient") {
    Tape t2;
    Var in = t2.input(l);
    MaskedLogits ml{in, std::vector<std::uint8_t>(3, 0)};
    Rng rng(19);
    Var sel = topk_select(t2, ml, 2, 0.5, rng, SelectMode::kInfer);
    Var loss = t2.sum_all(sel);  // upstream r = 1-vector
    t2.backward(loss);
    Tensor grad = t2.grad(in);
    for (double v : grad.data) CHECK(v == 0.0);
  }
  SUBCASE("masked entries select nothing and get zero gradient") {
    Tape t2;
    Var in = t2.input(l);
    MaskedLogits ml{in, {0, 0, 1}};  // exclude the runner-up index 2
    Rng rng(20);
    Var sel = topk_select(t2, ml, 2, 0.5, rng, SelectMode::kInfer);
    Tensor s = t2.val(sel);
    CHECK(s.at(0, 0) == 1.0);
    CHECK(s.at(0, 1) == 1.0);  // index 1 promoted once 2 is excluded
    CHECK(s.at(0, 2) == 0.0);
    Rng wr(21);
    Var loss = t2.sum_all(t2.mul(sel, t2.constant(test_util::rand_tensor(1, 3, wr, 1.0))));
    t2.backward(loss);
    CHECK(t2.grad(in).at(0, 2) == 0.0);
  }
  SUBCASE("backward matches finite differences of the implicit soft map") {
    Rng rng(22);
    for (int trial = 0; trial < 20; ++trial) {
      int n = 4 + rng.uniform_int(6);
      int k = 1 + rng.uniform_int(n - 1);
      Tensor x(1, static_cast<std::size_t>(n));
      for (double& v : x.data) v = rng.normal() * 2.0;

      for (int i = 0; i < std::min(n, 3); ++i) {
        Tape t2;
        Var in = t2.input(x);
        MaskedLogits ml{in, std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0)};
        Rng gr(23);
        Var sel = topk_select(t2, ml, k, 0.5, gr, SelectMode::kSoft);
        Tensor pick = Tensor::zeros(1, static_cast<std::size_t>(n));
        pick.at(0, static_cast<std::size_t>(i)) = 1.0;
        Var loss = t2.sum_all(t2.mul(sel, t2.constant(pick)));
        t2.backward(loss);
        Tensor an = t2.grad(in);

        const double h = 1e-6;
        for (int j = 0; j < std::min(n, 3); ++j) {
          auto soft = [&](double delta) {
            std::vector<double> xs(x.data);
            xs[static_cast<std::size_t>(j)] += delta;
            TopkState st = solve_shift(xs, k);
            return sigmoid(xs[static_cast<std::size_t>(i)] + st.shift);
          };
          double fd = (soft(h) - soft(-h)) / (2.0 * h);
          double got = an.at(0, static_cast<std::size_t>(j));
          if (std::abs(fd) < 1e-9 && std::abs(got) < 1e-9) continue;
          CHECK(test_util::rel_err(got, fd) <= 1e-4);
        }
      }
    }
  }
  SUBCASE("soft map is invariant under uniform logit shifts") {
    Rng rng(24);
    for (int trial = 0; trial < 50; ++trial) {
      int n = 3 + rng.uniform_int(10);
      std::vector<double> x(static_cast<std::size_t>(n));
      for (double& v : x) v = rng.normal() * 2.0;
      int k = 1 + rng.uniform_int(n - 1);
      double c = rng.normal() * 5.0;
      TopkState a = solve_shift(x, k);
      std::vector<double> xs = x;
      for (double& v : xs) v += c;
      TopkState b = solve_shift(xs, k);
      for (std::size_t i = 0; i < x.size(); ++i) {
        double fa = sigmoid(x[i] + a.shift);
        double fb = sigmoid(xs[i] + b.shift);
        CHECK(std::abs(fa - fb) <= 1e-8);
      }
    }
  }
}

TEST_CASE("trigger edge construction: counts and membership") {
  auto [g, roles] = test_util::path_graph();
  CandidatePool pool;
  pool.per_type.push_back({2, 2, {0, 1}, {1.0, 1.0}, false});  // aux type A, budget 2

  SUBCASE("one trigger, one aux type with K=2 gives 3 edges") {
    auto edges = build_trigger_edges(g, roles, pool, {0}, {{{0, 1}}});
    REQUIRE(edges.size() == 3);
    int rv = g.relation_id(roles.primary, roles.trigger);
    int ra = g.relation_id(roles.trigger, 2);
    NodeId nid = g.num_nodes(roles.trigger);
    CHECK(std::get<0>(edges[0]) == rv);
    CHECK(std::get<1>(edges[0]) == 0);     // victim
    CHECK(std::get<2>(edges[0]) == nid);   // new trigger id
    CHECK(std::get<0>(edges[1]) == ra);
    CHECK(std::get<0>(edges[2]) == ra);
  }
  SUBCASE("random membership holds over 100 draws") {
    Rng rng(25);
    for (int t = 0; t < 100; ++t) {
      std::vector<NodeId> victims{static_cast<NodeId>(rng.uniform_int(2)),
                                  static_cast<NodeId>(rng.uniform_int(2))};
      std::vector<std::vector<std::vector<int>>> sel(2);
      for (auto& per_aux : sel) {
        std::vector<int> pos = rng.sample_without_replacement(2, 2);
        per_aux.push_back(pos);
      }
      auto edges = build_trigger_edges(g, roles, pool, victims, sel);
      CHECK(edges.size() == 6);  // 2 triggers x (victim link + 2 pool links)
      NodeId base = g.num_nodes(roles.trigger);
      for (auto& [r, s, d] : edges) {
        const Relation& rel = g.relation(r);
        if (rel.src == roles.primary) {
          CHECK(d >= base);  // victim link points at a new trigger
        } else {
          CHECK(rel.src == roles.trigger);
          CHECK(s >= base);
          CHECK((d == 0 || d == 1));  // pool members only
        }
      }
    }
  }
}

TEST_CASE("diversity loss: disjoint, identical, margin saturation, range, warning") {
  Tape tape;
  auto pattern = [&](std::initializer_list<double> v) {
    Tensor t(1, v.size());
    std::size_t j = 0;
    for (double x : v) t.at(0, j++) = x;
    return tape.constant(t);
  };

  SUBCASE("disjoint selections cost nothing") {
    std::vector<std::vector<Var>> sel{{pattern({1, 0, 0, 0}), pattern({0, 1, 0, 0}),
                                       pattern({0, 0, 1, 0})}};
    CHECK(tape.val(diversity_loss(tape, sel, 0.3)).at(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("identical selections cost 1 - tau") {
    std::vector<std::vector<Var>> sel{{pattern({1, 1, 0}), pattern({1, 1, 0}),
                                       pattern({1, 1, 0})}};
    CHECK(tape.val(diversity_loss(tape, sel, 0.1)).at(0, 0) ==
          doctest::Approx(0.9).epsilon(1e-12));
    CHECK(tape.val(diversity_loss(tape, sel, 1.0)).at(0, 0) ==
          doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("two aux types average their penalties") {
    std::vector<std::vector<Var>> sel{{pattern({1, 0}), pattern({1, 0})},
                                      {pattern({1, 0}), pattern({0, 1})}};
    // First type: identical -> 1 - 0.25; second: disjoint -> 0; mean halves it.
    CHECK(tape.val(diversity_loss(tape, sel, 0.25)).at(0, 0) ==
          doctest::Approx(0.375).epsilon(1e-12));
  }
  SUBCASE("random patterns stay within [0, 1 - tau]") {
    Rng rng(26);
    for (int t = 0; t < 50; ++t) {
      std::vector<std::vector<Var>> sel(1);
      int B = 2 + rng.uniform_int(4);
      for (int b = 0; b < B; ++b) {
        Tensor p = Tensor::zeros(1, 6);
        int ones = 1 + rng.uniform_int(5);
        for (int u : rng.sample_without_replacement(6, ones))
          p.at(0, static_cast<std::size_t>(u)) = 1.0;
        sel[0].push_back(tape.constant(p));
      }
      double tau = 0.2;
      double v = tape.val(diversity_loss(tape, sel, tau)).at(0, 0);
      CHECK(v >= -1e-15);
      CHECK(v <= 1.0 - tau + 1e-12);
    }
  }
  SUBCASE("fewer than two patterns contributes zero with a warning") {
    Warnings w;
    std::vector<std::vector<Var>> sel{{pattern({1, 0, 1})}};
    CHECK(tape.val(diversity_loss(tape, sel, 0.3, &w)).at(0, 0) == 0.0);
    CHECK(!w.empty());
  }
}

TEST_CASE("generate_delta produces schema-valid deltas with in-pool selections") {
  auto [g, roles] = test_util::path_graph();
  GeneratorConfig gc;
  gc.triggers_per_victim = 2;
  TriggerGenerator gen = small_gen(g, roles, 27, gc);
  AdaINStats stats = AdaINStats::from_features(g.features(roles.trigger));
  CandidatePool pool;
  pool.per_type.push_back({2, 1, {0, 1}, {1.0, 1.0}, false});

  Rng noise(28), gumbel(29), mask(30);
  Warnings w;
  GenerationResult res = generate_delta(gen, g, roles, pool, {0, 1}, stats, nullptr, nullptr,
                                        noise, gumbel, mask, SelectMode::kInfer, &w);
  // 2 victims x 2 triggers each.
  CHECK(res.delta.victim_of.size() == 4);
  CHECK(res.delta.new_features.rows() == 4);
  REQUIRE(res.patterns.size() == 1);
  CHECK(res.patterns[0].size() == 4);
  for (const auto& pat : res.patterns[0]) {
    REQUIRE(pat.size() == 2);
    CHECK(std::accumulate(pat.begin(), pat.end(), 0) == 1);  // budget K=1
  }
  // The delta applies cleanly and grows the graph by the right amounts.
  HeteroGraph poisoned = apply_delta(g, roles, res.delta);
  CHECK(poisoned.num_nodes(roles.trigger) == g.num_nodes(roles.trigger) + 4);
  CHECK(poisoned.num_edges() == g.num_edges() + res.delta.new_edges.size());
  // Inference mode with identical RNG state reproduces the same delta.
  Rng n2(28), g2(29), m2(30);
  GenerationResult res2 = generate_delta(gen, g, roles, pool, {0, 1}, stats, nullptr, nullptr,
                                         n2, g2, m2, SelectMode::kInfer, nullptr);
  CHECK(res2.delta.new_features.data == res.delta.new_features.data);
  CHECK(res2.delta.new_edges == res.delta.new_edges);
}

TEST_CASE("generator JSON round-trip is bitwise") {
  auto [g, roles] = test_util::path_graph();
  TriggerGenerator gen = small_gen(g, roles, 31);
  AdaINStats stats = AdaINStats::from_features(g.features(roles.trigger));
  std::string p = "/tmp/hgl_test_generator.json";
  save_generator_json(p, gen, stats);
  LoadedGenerator back = load_generator_json(p);
  auto a = gen.params();
  auto b = back.gen.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->data == b[i]->data);
  CHECK(back.stats.mu.data == stats.mu.data);
  CHECK(back.stats.sigma.data == stats.sigma.data);
  CHECK(back.gen.cfg.triggers_per_victim == gen.cfg.triggers_per_victim);
  std::remove(p.c_str());
}
