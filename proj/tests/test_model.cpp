#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "hyperrec/model.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace hyperrec;
using testutil::random_tensor;

namespace {

AttentionContext make_ctx(std::vector<std::pair<int64_t, int64_t>> pairs, int64_t n) {
  AttentionContext ctx;
  ctx.pattern = SparsePattern::build(n, n, std::move(pairs));
  ctx.spans = std::make_shared<IndexVec>(ctx.pattern->row_ptr);
  return ctx;
}

Tensor identity(int64_t d) {
  Tensor t({d, d});
  for (int64_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

// Small random interaction + knowledge fixture for whole-model tests.
struct Fixture {
  InteractionSet inter;
  TripleStore ckhg;
  SnapshotSet snaps;
};

Fixture make_fixture(int64_t users, int64_t items, int64_t extra_entities, uint64_t seed) {
  auto rng = testutil::make_rng(seed);
  Fixture f;
  f.inter.num_users = users;
  f.inter.num_items = items;
  for (int64_t u = 0; u < users; ++u) {
    f.inter.pairs.emplace_back(u, static_cast<int64_t>(rng() % static_cast<uint64_t>(items)));
    f.inter.pairs.emplace_back(u, static_cast<int64_t>(rng() % static_cast<uint64_t>(items)));
  }
  for (int64_t i = 0; i < items; ++i) f.inter.pairs.emplace_back(static_cast<int64_t>(rng() % static_cast<uint64_t>(users)), i);
  std::sort(f.inter.pairs.begin(), f.inter.pairs.end());
  f.inter.pairs.erase(std::unique(f.inter.pairs.begin(), f.inter.pairs.end()),
                      f.inter.pairs.end());
  for (int64_t u = 0; u < users; ++u) f.inter.user_original.push_back(u);
  for (int64_t i = 0; i < items; ++i) f.inter.item_original.push_back(i);

  TripleStore kg;
  kg.num_items = items;
  kg.num_entities = items + extra_entities;
  kg.kg_relations = 2;
  kg.canonical_relations = 3;
  for (int64_t e = 0; e < kg.num_entities; ++e) kg.entity_original.push_back(e);
  kg.relation_original = {-1, 1, 2};
  std::vector<TripleStore::Triple> raw;
  for (int64_t i = 0; i < items; ++i) {
    int64_t ent = items + static_cast<int64_t>(rng() % static_cast<uint64_t>(extra_entities));
    int64_t rel = 1 + static_cast<int64_t>(rng() % 2);
    raw.push_back({i, rel, ent});
  }
  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
  kg.source_triples = static_cast<int64_t>(raw.size());
  for (const auto& t : raw) {
    kg.triples.push_back(t);
    kg.triples.push_back({t.tail, t.rel + kg.canonical_relations, t.head});
  }
  std::sort(kg.triples.begin(), kg.triples.end());

  f.ckhg = build_ckhg(f.inter, kg);
  f.snaps = build_snapshots(f.ckhg);
  return f;
}

Model make_model(const Fixture& f, ModelConfig cfg, uint64_t seed) {
  return Model(ModelState::init(cfg, f.inter.num_users, f.inter.num_items, f.ckhg.total_nodes(),
                                f.ckhg.directed_relations(), seed));
}

}  // namespace

TEST_CASE("self_attention: singleton neighborhood is the value projection") {
  Tape t;
  auto rng = testutil::make_rng(1);
  Tensor h = random_tensor({1, 3}, rng);
  Tensor v = random_tensor({3, 3}, rng);
  auto ctx = make_ctx({{0, 0}}, 1);
  Var out = self_attention(t, t.constant(h), ctx, t.constant(random_tensor({3, 3}, rng)),
                           t.constant(random_tensor({3, 3}, rng)), t.constant(v));
  // alpha = 1 so the pre-norm row is h + V h
  std::vector<double> row(3, 0.0);
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 3; ++j) row[static_cast<size_t>(i)] += v.at(i, j) * h.at(0, j);
    row[static_cast<size_t>(i)] += h.at(0, i);
  }
  oracles::layer_norm_row(row, kLayerNormEps);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(t.value(out).at(0, i) == doctest::Approx(row[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("self_attention: identical keys split attention evenly") {
  Tape t;
  auto rng = testutil::make_rng(2);
  Tensor h = random_tensor({2, 2}, rng);
  Tensor v = identity(2);
  Tensor zero({2, 2});
  // node 0 attends to itself and node 1; zero keys make both scores equal
  auto ctx = make_ctx({{0, 0}, {0, 1}, {1, 1}}, 2);
  Var out = self_attention(t, t.constant(h), ctx, t.constant(identity(2)), t.constant(zero),
                           t.constant(v));
  std::vector<double> row{h.at(0, 0) + 0.5 * (h.at(0, 0) + h.at(1, 0)),
                          h.at(0, 1) + 0.5 * (h.at(0, 1) + h.at(1, 1))};
  oracles::layer_norm_row(row, kLayerNormEps);
  CHECK(t.value(out).at(0, 0) == doctest::Approx(row[0]).epsilon(1e-12));
  CHECK(t.value(out).at(0, 1) == doctest::Approx(row[1]).epsilon(1e-12));
}

TEST_CASE("self_attention matches the dense oracle on a 3-node fixture") {
  auto rng = testutil::make_rng(3);
  Tensor h = random_tensor({3, 4}, rng);
  Tensor q = random_tensor({4, 4}, rng);
  Tensor k = random_tensor({4, 4}, rng);
  Tensor v = random_tensor({4, 4}, rng);
  std::vector<std::pair<int64_t, int64_t>> neigh{{0, 0}, {0, 1}, {1, 0}, {1, 1},
                                                 {1, 2}, {2, 1}, {2, 2}};
  Tape t;
  auto ctx = make_ctx(neigh, 3);
  Var out =
      self_attention(t, t.constant(h), ctx, t.constant(q), t.constant(k), t.constant(v));
  Tensor want = oracles::dense_self_attention(h, q, k, v, neigh, kLayerNormEps);
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(std::fabs(t.value(out).at(i, j) - want.at(i, j)) <= 1e-10);
    }
  }
}

TEST_CASE("transition reduces to layer norm when the feed-forward is zero") {
  auto rng = testutil::make_rng(4);
  Tensor h = random_tensor({3, 4}, rng);
  Tensor zero_w({4, 4}), zero_b({4});
  {
    Tape t;
    Var out = transition(t, t.constant(h), t.constant(zero_w), t.constant(zero_b),
                         t.constant(zero_w), t.constant(zero_b), 0.2);
    Var ln = t.layer_norm_rows(t.constant(h));
    CHECK(t.value(out).vec() == t.value(ln).vec());
  }
  {
    // identity first affine, zero second layer
    Tape t;
    Var out = transition(t, t.constant(h), t.constant(identity(4)), t.constant(zero_b),
                         t.constant(zero_w), t.constant(zero_b), 0.2);
    Var ln = t.layer_norm_rows(t.constant(h));
    CHECK(t.value(out).vec() == t.value(ln).vec());
  }
  {
    // random fixture against an independent dense recomputation
    Tape t;
    Tensor w1 = random_tensor({4, 4}, rng), b1 = random_tensor({4}, rng);
    Tensor w2 = random_tensor({4, 4}, rng), b2 = random_tensor({4}, rng);
    Var out = transition(t, t.constant(h), t.constant(w1), t.constant(b1), t.constant(w2),
                         t.constant(b2), 0.2);
    for (int64_t r = 0; r < 3; ++r) {
      std::vector<double> mid(4, 0.0), fin(4, 0.0);
      for (int64_t i = 0; i < 4; ++i) {
        double s = b1.at(i);
        for (int64_t j = 0; j < 4; ++j) s += w1.at(i, j) * h.at(r, j);
        mid[static_cast<size_t>(i)] = oracles::leaky(s, 0.2);
      }
      for (int64_t i = 0; i < 4; ++i) {
        double s = b2.at(i);
        for (int64_t j = 0; j < 4; ++j) s += w2.at(i, j) * mid[static_cast<size_t>(j)];
        fin[static_cast<size_t>(i)] = s + h.at(r, i);
      }
      oracles::layer_norm_row(fin, kLayerNormEps);
      for (int64_t i = 0; i < 4; ++i) {
        CHECK(std::fabs(t.value(out).at(r, i) - fin[static_cast<size_t>(i)]) <= 1e-10);
      }
    }
  }
}

TEST_CASE("hgconv examples") {
  {
    // identity operator and weight pass positive input through
    Tape t;
    auto theta = std::make_shared<SparseMatrix>(SparseMatrix::identity(3));
    Tensor h = Tensor({3, 2}, {1, 2, 3, 4, 5, 6});
    Var out = hgconv(t, t.constant(h), theta, t.constant(identity(2)), 0.2);
    CHECK(t.value(out).vec() == h.vec());
  }
  {
    // two nodes in one hyperedge annihilate a constant signal
    Snapshot s;
    s.num_nodes = 2;
    s.num_edges = 1;
    s.incidence = std::make_shared<SparseMatrix>(
        2, 1, std::vector<SparseMatrix::Entry>{{0, 0, 1.0}, {1, 0, 1.0}});
    s.edge_weights = {1.0};
    s.edge_key = {0};
    auto theta = std::make_shared<SparseMatrix>(normalized_operator(s));
    Tape t;
    Var out = hgconv(t, t.constant(Tensor({2, 1}, {1, 1})), theta,
                     t.constant(Tensor({1, 1}, {1})), 0.2);
    CHECK(t.value(out).at(0, 0) == 0.0);
    CHECK(t.value(out).at(1, 0) == 0.0);
  }
  // random instances against the dense oracle
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto rng = testutil::make_rng(500 + seed);
    Fixture f = make_fixture(4 + seed % 4, 3 + seed % 3, 3, seed);
    auto theta = std::make_shared<SparseMatrix>(normalized_operator(f.snaps.user_view));
    Tensor h = random_tensor({f.snaps.user_view.num_nodes, 3}, rng);
    Tensor p = random_tensor({3, 3}, rng);
    Tape t;
    Var out = hgconv(t, t.constant(h), theta, t.constant(p), 0.2);
    Tensor want = oracles::dense_hgconv(oracles::dense_theta(f.snaps.user_view), h, p, 0.2);
    for (int64_t i = 0; i < want.numel(); ++i) {
      CHECK(std::fabs(t.value(out).at(i) - want.at(i)) <= 1e-10);
    }
  }
}

TEST_CASE("hgtn_forward: shapes, layer count, gradients") {
  Fixture f = make_fixture(5, 4, 3, 11);
  auto theta = std::make_shared<SparseMatrix>(normalized_operator(f.snaps.user_view));
  auto pat = attention_pattern(f.snaps.user_view);
  AttentionContext ctx{pat, std::make_shared<IndexVec>(pat->row_ptr)};

  auto rng = testutil::make_rng(12);
  int64_t n = f.snaps.user_view.num_nodes, d = 3;

  {
    // identity-initialized single layer stays finite with the right shape
    Tape t;
    ParamVars::LayerVars lv;
    lv.q = t.constant(identity(d));
    lv.k = t.constant(identity(d));
    lv.v = t.constant(identity(d));
    lv.p = t.constant(identity(d));
    lv.ff1_w = t.constant(identity(d));
    lv.ff1_b = t.constant(Tensor({d}));
    lv.ff2_w = t.constant(Tensor({d, d}));
    lv.ff2_b = t.constant(Tensor({d}));
    auto id_op = std::make_shared<SparseMatrix>(SparseMatrix::identity(n));
    Tensor x = random_tensor({n, d}, rng);
    EncoderOutput out = hgtn_forward(t, t.constant(x), ctx, id_op, {lv}, 1, false, 0.2, false);
    CHECK(out.layers.size() == 2);
    const Tensor& m = t.value(out.final);
    CHECK(m.rows() == n);
    CHECK(m.cols() == d);
    for (int64_t i = 0; i < m.numel(); ++i) CHECK(std::isfinite(m.at(i)));
  }
  {
    // layer states count is L + 1
    Tape t;
    Model model = make_model(f, ModelConfig{.dim = d, .layers = 3}, 1);
    ParamVars pv = model.bind(t);
    EncoderOutput out = hgtn_forward(t, pv.user_table, ctx, theta, pv.user_layers, 3, false,
                                     0.2, false);
    CHECK(out.layers.size() == 4);
    CHECK_THROWS_AS(
        hgtn_forward(t, pv.user_table, ctx, theta, pv.user_layers, 0, false, 0.2, false),
        std::invalid_argument);
  }
  {
    // gradient of a scalar readout w.r.t. the features matches finite differences
    ModelConfig cfg{.dim = d, .layers = 1};
    Model model = make_model(f, cfg, 2);
    Tensor x = random_tensor({n, d}, rng);
    const LayerParams& lp = model.state().user_layers[0];
    auto rep = testutil::fd_check(
        {x, lp.q, lp.k, lp.v, lp.p},
        [&](Tape& t, const std::vector<Var>& v) {
          ParamVars::LayerVars lv;
          lv.q = v[1];
          lv.k = v[2];
          lv.v = v[3];
          lv.p = v[4];
          lv.ff1_w = t.constant(lp.ff1_w);
          lv.ff1_b = t.constant(lp.ff1_b);
          lv.ff2_w = t.constant(lp.ff2_w);
          lv.ff2_b = t.constant(lp.ff2_b);
          EncoderOutput out = hgtn_forward(t, v[0], ctx, theta, {lv}, 1, false, 0.2, false);
          return t.l2_norm_sq(out.final);
        });
    CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.worst);
  }
}

TEST_CASE("relation attention scores") {
  auto one_score = [](const Tensor& table, const Tensor& w, const Tensor& e, int64_t h,
                      int64_t tt) {
    Tape t;
    auto hs = std::make_shared<IndexVec>(IndexVec{h});
    auto ts = std::make_shared<IndexVec>(IndexVec{tt});
    Var out = relation_attention_scores(t, t.constant(table), t.constant(w), t.constant(e), hs, ts);
    return t.value(out).at(0);
  };
  Tensor table({3, 2}, {10, 10, 1, 2, 0, 0});
  CHECK(one_score(table, Tensor({2, 2}), Tensor({2}), 0, 1) == 0.0);  // W_r = 0
  CHECK(one_score(table, identity(2), Tensor({2}), 2, 1) == 0.0);     // e_h = 0, tanh(0) = 0
  // W_r = I, e_r = 0, e_h = [10,10], e_t = [1,2]
  double want = 3.0 * std::tanh(10.0);
  CHECK(one_score(table, identity(2), Tensor({2}), 0, 1) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("attention normalization over ego networks") {
  Tape t;
  auto spans = std::make_shared<IndexVec>(IndexVec{0, 2, 3, 5});
  Var scores = t.constant(Tensor({5}, {1.0, 1.0, 4.2, std::log(1.0), std::log(3.0)}));
  Var pi = t.segment_softmax(scores, spans);
  CHECK(t.value(pi).at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(t.value(pi).at(1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(t.value(pi).at(2) == doctest::Approx(1.0).epsilon(1e-12));  // singleton
  CHECK(t.value(pi).at(3) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.value(pi).at(4) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("attentive incidence carries the normalized scores") {
  // head with two tails at 0.25 / 0.75 lands on the matching entries
  Fixture f = make_fixture(3, 3, 2, 21);
  const Snapshot& kv = f.snaps.knowledge_view;
  Tape t;
  // uniform scores: incidence values equal the size of each triple group
  Tensor ones({kv.triple_count()});
  for (int64_t i = 0; i < ones.numel(); ++i) ones.at(i) = 1.0;
  Var inc = t.segment_sum(t.constant(ones), kv.incidence_triple_offsets);
  // with one triple per incidence this is exactly the binary incidence
  CHECK(t.value(inc).numel() == kv.edge_node_pattern->nnz());
  bool all_single = true;
  for (size_t i = 0; i + 1 < kv.incidence_triple_offsets->size(); ++i) {
    if ((*kv.incidence_triple_offsets)[i + 1] - (*kv.incidence_triple_offsets)[i] != 1) {
      all_single = false;
    }
  }
  if (all_single) {
    for (int64_t i = 0; i < t.value(inc).numel(); ++i) CHECK(t.value(inc).at(i) == 1.0);
  }

  // per-head distributions: non-negative, sum to one over each ego network
  ModelConfig cfg{.dim = 4, .layers = 2};
  Model model = make_model(f, cfg, 3);
  GraphOperators ops = build_operators(f.snaps, cfg);
  Tape t2;
  ModelForward fwd = model.forward(t2, ops);
  const Tensor& pi = t2.value(fwd.pi);
  const IndexVec& off = *kv.edge_triple_offsets;
  for (size_t e = 0; e + 1 < off.size(); ++e) {
    double sum = 0;
    for (int64_t k = off[e]; k < off[e + 1]; ++k) {
      CHECK(pi.at(k) >= 0.0);
      sum += pi.at(k);
    }
    if (off[e + 1] > off[e]) CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("knowledge encoder layer matches the dense oracle") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Fixture f = make_fixture(3 + seed % 3, 3, 2, 40 + seed);
    ModelConfig cfg{.dim = 3, .layers = 1};
    Model model = make_model(f, cfg, seed);
    GraphOperators ops = build_operators(f.snaps, cfg);
    Tape t;
    ModelForward fwd = model.forward(t, ops);

    // reconstruct the incidence values the forward used
    Var inc = t.segment_sum(fwd.pi, f.snaps.knowledge_view.incidence_triple_offsets);
    std::vector<double> inc_vals = t.value(inc).vec();
    Tensor want = oracles::dense_rhgat_layer(*f.snaps.knowledge_view.edge_node_pattern, inc_vals,
                                             model.state().entity_table,
                                             model.state().global_p[0], 0.2);
    const Tensor& got = t.value(fwd.knowledge_enc.layers[1]);
    for (int64_t i = 0; i < want.numel(); ++i) {
      CHECK(std::fabs(got.at(i) - want.at(i)) <= 1e-10);
    }
    // residual of the input features
    const Tensor& fin = t.value(fwd.knowledge_enc.final);
    for (int64_t i = 0; i < fin.numel(); ++i) {
      CHECK(fin.at(i) == doctest::Approx(got.at(i) + model.state().entity_table.at(i)).epsilon(1e-12));
    }
  }
}

TEST_CASE("knowledge encoder stays finite on degenerate embeddings") {
  Fixture f = make_fixture(4, 3, 2, 60);
  ModelConfig cfg{.dim = 3, .layers = 2};
  Model model = make_model(f, cfg, 9);
  // zero embeddings: scores all zero, attention uniform
  std::fill(model.state().entity_table.vec().begin(), model.state().entity_table.vec().end(), 0.0);
  GraphOperators ops = build_operators(f.snaps, cfg);
  Tape t;
  ModelForward fwd = model.forward(t, ops);
  const Tensor& pi = t.value(fwd.pi);
  const IndexVec& off = *f.snaps.knowledge_view.edge_triple_offsets;
  for (size_t e = 0; e + 1 < off.size(); ++e) {
    int64_t len = off[e + 1] - off[e];
    for (int64_t k = off[e]; k < off[e + 1]; ++k) {
      CHECK(pi.at(k) == doctest::Approx(1.0 / static_cast<double>(len)).epsilon(1e-12));
    }
  }
  for (int64_t i = 0; i < t.value(fwd.knowledge_enc.final).numel(); ++i) {
    CHECK(std::isfinite(t.value(fwd.knowledge_enc.final).at(i)));
  }
}

TEST_CASE("transr energies") {
  auto energy = [](const Tensor& table, const Tensor& w, const Tensor& e, int64_t h, int64_t tt) {
    Tape t;
    auto hs = std::make_shared<IndexVec>(IndexVec{h});
    auto ts = std::make_shared<IndexVec>(IndexVec{tt});
    Var out = transr_energies(t, t.constant(table), t.constant(w), t.constant(e), hs, ts);
    return t.value(out).at(0);
  };
  // e_h = e_t, e_r = 0
  Tensor same({2, 2}, {3, 4, 3, 4});
  CHECK(energy(same, identity(2), Tensor({2}), 0, 1) == 0.0);
  // exact translation: e_h = [1,0], e_r = [0,1], e_t = [1,1]
  Tensor tr({2, 2}, {1, 0, 1, 1});
  CHECK(energy(tr, identity(2), Tensor({2}, {0, 1}), 0, 1) == 0.0);
  // plain squared distance: e_h = 0, e_t = [3,4]
  Tensor dist({2, 2}, {0, 0, 3, 4});
  CHECK(energy(dist, identity(2), Tensor({2}), 0, 1) == 25.0);
}

TEST_CASE("kg ranking loss closed forms") {
  // d = 1 energies: delta = (e_h + e_r - e_t)^2
  Fixture f = make_fixture(3, 3, 3, 70);
  ModelConfig cfg{.dim = 1, .layers = 1};
  Model model = make_model(f, cfg, 4);
  // entity 0 head; tails engineered for exact gaps
  Tensor& table = model.state().entity_table;
  table.at(0) = 0.0;
  table.at(1) = 1.0;                       // delta = 1
  table.at(2) = std::sqrt(1.0 + std::log(3.0));  // delta = 1 + ln 3
  model.state().rel_w[1] = Tensor({1, 1}, {1.0});
  model.state().rel_e[1] = Tensor({1}, {0.0});

  Tape t;
  ParamVars pv = model.bind(t);
  {
    // equal energies: per-pair loss = ln 2
    Var loss = model.kg_loss(t, pv, {0}, {1}, {1}, {1});
    CHECK(t.value(loss).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  {
    // corrupted energy exceeds the positive by ln 3: loss = -ln(3/4)
    Var loss = model.kg_loss(t, pv, {0}, {1}, {1}, {2});
    CHECK(t.value(loss).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-10));
  }
  {
    // widening the gap drives the loss toward zero monotonically
    double prev = 1e9;
    for (double gap : {0.0, 1.0, 2.0, 4.0, 8.0}) {
      table.at(2) = std::sqrt(1.0 + gap);
      Tape t2;
      ParamVars pv2 = model.bind(t2);
      double l = t2.value(model.kg_loss(t2, pv2, {0}, {1}, {1}, {2})).item();
      CHECK(l < prev);
      prev = l;
    }
  }
  CHECK_THROWS_AS(model.kg_loss(t, pv, {0}, {99}, {1}, {2}), std::invalid_argument);
}

TEST_CASE("kg loss gradients match finite differences on a small store") {
  Fixture f = make_fixture(3, 3, 3, 80);
  ModelConfig cfg{.dim = 3, .layers = 1};
  Model model = make_model(f, cfg, 5);
  std::vector<int64_t> heads{0, 1, 2, 3}, rels{1, 2, 1, 2}, tails{3, 4, 5, 0}, neg{5, 0, 4, 1};
  auto rep = testutil::fd_check(
      {model.state().entity_table, model.state().rel_w[1], model.state().rel_e[1],
       model.state().rel_w[2], model.state().rel_e[2]},
      [&](Tape& t, const std::vector<Var>& v) {
        ParamVars pv = model.bind(t);
        ParamVars patched = pv;
        patched.entity_table = v[0];
        patched.rel_w[1] = v[1];
        patched.rel_e[1] = v[2];
        patched.rel_w[2] = v[3];
        patched.rel_e[2] = v[4];
        return model.kg_loss(t, patched, heads, rels, tails, neg);
      });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.worst);
}

TEST_CASE("channel fusion") {
  auto rng = testutil::make_rng(91);
  int64_t n = 4, d = 3;
  Tensor m = random_tensor({n, d}, rng);
  Tensor w = random_tensor({d, d}, rng), b = random_tensor({d}, rng), q = random_tensor({d}, rng);
  {
    // equal channels are a fixed point for any attention weights
    Tape t;
    auto fr = channel_fusion(t, t.constant(m), t.constant(m), t.constant(w), t.constant(b),
                             t.constant(q), false);
    for (int64_t i = 0; i < m.numel(); ++i) {
      CHECK(t.value(fr.fused).at(i) == doctest::Approx(m.at(i)).epsilon(1e-12));
    }
    const Tensor& beta = t.value(fr.beta);
    CHECK(beta.at(0) + beta.at(1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(beta.at(0) > 0.0);
    CHECK(beta.at(1) < 1.0);
  }
  {
    // zero attention parameters give the plain average
    Tape t;
    Tensor m2 = random_tensor({n, d}, rng);
    auto fr = channel_fusion(t, t.constant(m), t.constant(m2), t.constant(Tensor({d, d})),
                             t.constant(Tensor({d})), t.constant(Tensor({d})), false);
    CHECK(t.value(fr.beta).at(0) == doctest::Approx(0.5).epsilon(1e-15));
    for (int64_t i = 0; i < m.numel(); ++i) {
      CHECK(t.value(fr.fused).at(i) == doctest::Approx(0.5 * (m.at(i) + m2.at(i))).epsilon(1e-12));
    }
  }
  {
    // channel weights (ln 1, ln 3) produce beta = (0.25, 0.75), and each fused
    // row sits exactly on the segment between the channel rows
    int64_t dd = 1;
    Tensor w1 = identity(dd);
    Tensor b1({dd});
    Tensor q1({dd}, {2.0});
    Tensor cf({n, dd});  // tanh(0) = 0 -> weight ln 1 = 0
    double v_ckg = std::atanh(std::log(3.0) / 2.0);
    Tensor ckg = Tensor::full({n, dd}, v_ckg);
    Tape t;
    auto fr = channel_fusion(t, t.constant(cf), t.constant(ckg), t.constant(w1), t.constant(b1),
                             t.constant(q1), false);
    CHECK(t.value(fr.beta).at(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(t.value(fr.beta).at(1) == doctest::Approx(0.75).epsilon(1e-12));
    for (int64_t i = 0; i < n; ++i) {
      CHECK(t.value(fr.fused).at(i) == doctest::Approx(0.25 * 0.0 + 0.75 * v_ckg).epsilon(1e-12));
    }
  }
  {
    // fixed-beta ablation
    Tape t;
    Tensor m2 = random_tensor({n, d}, rng);
    auto fr = channel_fusion(t, t.constant(m), t.constant(m2), t.constant(w), t.constant(b),
                             t.constant(q), true);
    CHECK(t.value(fr.beta).at(0) == 0.5);
    for (int64_t i = 0; i < m.numel(); ++i) {
      CHECK(t.value(fr.fused).at(i) == doctest::Approx(0.5 * (m.at(i) + m2.at(i))).epsilon(1e-15));
    }
  }
  {
    Tape t;
    Tensor short_m = random_tensor({n - 1, d}, rng);
    CHECK_THROWS_AS(channel_fusion(t, t.constant(m), t.constant(short_m), t.constant(w),
                                   t.constant(b), t.constant(q), false),
                    std::invalid_argument);
  }
}

TEST_CASE("infonce closed forms and properties") {
  auto idx = [](int64_t n) {
    auto v = std::make_shared<IndexVec>();
    for (int64_t i = 0; i < n; ++i) v->push_back(i);
    return v;
  };
  {
    // identical rows: all similarities equal, each term is ln N
    int64_t n = 5, d = 4;
    Tensor z = Tensor::full({n, d}, 0.3);
    Tape t;
    Var loss = infonce(t, {t.constant(z)}, {t.constant(z)}, idx(n), idx(n), 0.7);
    double per_term = t.value(loss).item() / static_cast<double>(n);
    CHECK(per_term == doctest::Approx(std::log(5.0)).epsilon(1e-9));
  }
  {
    // orthogonal rows, tau = 1: per-term -log(e / (e + N - 1))
    Tensor z = identity(3);
    Tape t;
    Var loss = infonce(t, {t.constant(z)}, {t.constant(z)}, idx(3), idx(3), 1.0);
    double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(t.value(loss).item() / 3.0 == doctest::Approx(want).epsilon(1e-9));
    CHECK(want == doctest::Approx(0.5514).epsilon(1e-4));
  }
  {
    // every term is non-negative; raising a positive similarity lowers the loss
    auto rng = testutil::make_rng(17);
    Tensor z = random_tensor({4, 3}, rng);
    Tensor g = random_tensor({4, 3}, rng);
    Tape t;
    double base = t.value(infonce(t, {t.constant(z)}, {t.constant(g)}, idx(4), idx(4), 0.5)).item();
    CHECK(base >= 0.0);
    // move one global row toward its matching local row
    Tensor g2 = g;
    for (int64_t j = 0; j < 3; ++j) g2.at(0, j) = z.at(0, j);
    Tape t2;
    double closer =
        t2.value(infonce(t2, {t2.constant(z)}, {t2.constant(g2)}, idx(4), idx(4), 0.5)).item();
    CHECK(closer < base);
  }
  {
    Tape t;
    Tensor z({2, 2});
    CHECK_THROWS_AS(infonce(t, {t.constant(z)}, {}, idx(2), idx(2), 0.5), std::invalid_argument);
  }
}

TEST_CASE("bpr closed forms") {
  auto run = [](double pos, double neg) {
    Tape t;
    Tensor u({1, 1}, {1.0});
    Tensor p({1, 1}, {pos});
    Tensor n({1, 1}, {neg});
    return t.value(bpr_loss(t, t.constant(u), t.constant(p), t.constant(n))).item();
  };
  CHECK(run(1.0, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(run(std::log(3.0), 0.0) == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  double prev = 1e18;
  for (double gap : {-1.0, 0.0, 1.0, 3.0}) {
    double l = run(gap, 0.0);
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("total loss breakdown") {
  auto b = total_loss(1.5, 2.5, 0, 0, 0, 0, 0);
  CHECK(b.total == 4.0);
  b = total_loss(1, 1, 1, 1, 1, 0.0, 0.5);
  CHECK(b.total == doctest::Approx(3.0).epsilon(1e-15));
  auto rng = testutil::make_rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    double cf = testutil::urand(rng, 0, 5), kg = testutil::urand(rng, 0, 5);
    double su = testutil::urand(rng, 0, 5), si = testutil::urand(rng, 0, 5);
    double reg = testutil::urand(rng, 0, 5);
    double l1 = testutil::urand(rng, 0, 1), l2 = testutil::urand(rng, 0, 1);
    auto bb = total_loss(cf, kg, su, si, reg, l1, l2);
    CHECK(std::fabs(bb.total - (bb.cf + bb.kg + l2 * (bb.ssl_user + bb.ssl_item) + l1 * bb.reg)) <=
          1e-9);
  }
  CHECK_THROWS_WITH_AS(total_loss(std::nan(""), 0, 0, 0, 0, 0, 0),
                       "total_loss: non-finite cf term", std::runtime_error);
}

TEST_CASE("encoder outputs are finite across random seeds") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Fixture f = make_fixture(4, 3, 2, 900 + seed);
    ModelConfig cfg{.dim = 3, .layers = 2};
    Model model = make_model(f, cfg, seed);
    GraphOperators ops = build_operators(f.snaps, cfg);
    Tape t;
    ModelForward fwd = model.forward(t, ops);
    for (const Var* v : {&fwd.user_enc.final, &fwd.item_enc.final, &fwd.knowledge_enc.final,
                         &fwd.item_fused}) {
      const Tensor& m = t.value(*v);
      for (int64_t i = 0; i < m.numel(); ++i) CHECK(std::isfinite(m.at(i)));
    }
  }
}

TEST_CASE("node permutation equivariance of the local encoder") {
  Fixture f = make_fixture(5, 4, 2, 77);
  ModelConfig cfg{.dim = 3, .layers = 2};
  Model model = make_model(f, cfg, 8);

  // permute user ids in the interaction set
  std::vector<int64_t> perm{2, 0, 4, 1, 3};  // new id of each old user
  InteractionSet permuted = f.inter;
  for (auto& [u, i] : permuted.pairs) u = perm[static_cast<size_t>(u)];
  std::sort(permuted.pairs.begin(), permuted.pairs.end());
  Fixture fp = f;
  fp.inter = permuted;
  fp.ckhg = build_ckhg(permuted, TripleStore{});
  fp.snaps = build_snapshots(fp.ckhg);

  Fixture f0 = f;
  f0.ckhg = build_ckhg(f.inter, TripleStore{});
  f0.snaps = build_snapshots(f0.ckhg);

  auto theta0 = std::make_shared<SparseMatrix>(normalized_operator(f0.snaps.user_view));
  auto thetap = std::make_shared<SparseMatrix>(normalized_operator(fp.snaps.user_view));
  auto pat0 = attention_pattern(f0.snaps.user_view);
  auto patp = attention_pattern(fp.snaps.user_view);
  AttentionContext c0{pat0, std::make_shared<IndexVec>(pat0->row_ptr)};
  AttentionContext cp{patp, std::make_shared<IndexVec>(patp->row_ptr)};

  auto rng = testutil::make_rng(123);
  Tensor x0 = random_tensor({5, 3}, rng);
  Tensor xp({5, 3});
  for (int64_t u = 0; u < 5; ++u) {
    for (int64_t j = 0; j < 3; ++j) xp.at(perm[static_cast<size_t>(u)], j) = x0.at(u, j);
  }

  Tape t0, tp;
  ParamVars pv0 = model.bind(t0), pvp = model.bind(tp);
  EncoderOutput o0 = hgtn_forward(t0, t0.constant(x0), c0, theta0, pv0.user_layers, 2, false,
                                  0.2, false);
  EncoderOutput op = hgtn_forward(tp, tp.constant(xp), cp, thetap, pvp.user_layers, 2, false,
                                  0.2, false);
  for (int64_t u = 0; u < 5; ++u) {
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(t0.value(o0.final).at(u, j) ==
            doctest::Approx(tp.value(op.final).at(perm[static_cast<size_t>(u)], j)).epsilon(1e-9));
    }
  }
}

TEST_CASE("end-to-end forward gradient check on a small fixture") {
  Fixture f = make_fixture(4, 3, 2, 55);
  ModelConfig cfg{.dim = 2, .layers = 1};
  Model model = make_model(f, cfg, 6);
  GraphOperators ops = build_operators(f.snaps, cfg);

  auto params = model.state().named_params();
  std::vector<Tensor> leaves;
  for (auto& [name, tp] : params) leaves.push_back(*tp);
  auto rep = testutil::fd_check(leaves, [&](Tape& t, const std::vector<Var>& v) {
    ParamVars pv = map_param_vars(model.state(), v);
    ModelForward fwd = model.forward(t, pv, ops);
    Var score = t.l2_norm_sq(fwd.item_fused);
    Var us = t.l2_norm_sq(fwd.user_enc.final);
    return t.add(score, us);
  });
  CHECK_MESSAGE(rep.max_rel_err < 1e-4, rep.worst);
}
