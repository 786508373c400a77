#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "hyperrec/trainer.hpp"
#include "synthetic.hpp"
#include "testutil.hpp"

using namespace hyperrec;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.embedding_dim = 16;
  cfg.layers = 2;
  cfg.lr = 1e-2;
  cfg.lambda1 = 1e-4;
  cfg.lambda2 = 1e-2;
  cfg.tau = 0.2;
  cfg.cf_batch = 512;
  cfg.kg_batch = 1024;
  cfg.max_epochs = 3;
  cfg.seed = 1;
  cfg.dropedge_rate = 0.1;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config parsing and validation") {
  TrainConfig cfg = TrainConfig::parse_text("lr = 0.001\nlayers=3\nno_ccl=true\nseed=42\n");
  CHECK(cfg.lr == 0.001);
  CHECK(cfg.layers == 3);
  CHECK(cfg.no_ccl);
  CHECK(cfg.seed == 42);

  CHECK_THROWS_WITH_AS(TrainConfig::parse_text("nonsense=1\n"),
                       "config line 1: unknown key 'nonsense'", std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::parse_text("lr=0.5\n"), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::parse_text("layers=9\n"), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::parse_text("tau=3\n"), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::parse_text("train_ratio=0.5\n"), std::invalid_argument);

  // canonical text round-trips and the digest is stable
  TrainConfig rt = TrainConfig::parse_text(cfg.to_text());
  CHECK(rt.to_text() == cfg.to_text());
  CHECK(rt.digest() == cfg.digest());
  TrainConfig other = cfg;
  other.seed = 43;
  CHECK(other.digest() != cfg.digest());
}

TEST_CASE("cf batch sampling") {
  InteractionSet train;
  train.num_users = 1;
  train.num_items = 2;
  train.pairs = {{0, 0}};
  train.user_original = {0};
  train.item_original = {0, 1};
  CfBatch forced = sample_cf_batch(train, 10, uint64_t{3});
  for (size_t i = 0; i < forced.neg.size(); ++i) {
    CHECK(forced.users[i] == 0);
    CHECK(forced.pos[i] == 0);
    CHECK(forced.neg[i] == 1);  // the only non-interacted item
  }

  auto data = synthetic::make_block_dataset(20, 16, 5, 0.9, 7);
  CfBatch big = sample_cf_batch(data.interactions, 4096, uint64_t{5});
  CHECK(big.users.size() == 4096);
  CHECK(big.pos.size() == 4096);
  CHECK(big.neg.size() == 4096);

  std::mt19937_64 rng(11);
  CfBatch many = sample_cf_batch(data.interactions, 10000, rng);
  for (size_t i = 0; i < many.users.size(); ++i) {
    CHECK(!data.interactions.contains(many.users[i], many.neg[i]));
  }

  // a user holding every item cannot be negative-sampled
  InteractionSet full;
  full.num_users = 1;
  full.num_items = 3;
  full.pairs = {{0, 0}, {0, 1}, {0, 2}};
  full.user_original = {0};
  full.item_original = {0, 1, 2};
  CHECK_THROWS_AS(sample_cf_batch(full, 1, uint64_t{1}), std::runtime_error);
}

TEST_CASE("kg batch sampling") {
  auto data = synthetic::make_block_dataset(20, 16, 5, 0.9, 7);
  TrainConfig cfg = small_config();
  DataBundle bundle = prepare_data(data.interactions, data.kg, cfg);

  KgBatch batch = sample_kg_batch(bundle.ckhg, 8192, uint64_t{5});
  CHECK(batch.heads.size() == 8192);

  std::mt19937_64 rng(13);
  KgBatch many = sample_kg_batch(bundle.ckhg, 10000, rng);
  for (size_t i = 0; i < many.heads.size(); ++i) {
    TripleStore::Triple t{many.heads[i], many.rels[i], many.corrupt[i]};
    CHECK(!std::binary_search(bundle.ckhg.triples.begin(), bundle.ckhg.triples.end(), t));
    // corruption preserves the node type
    CHECK(bundle.ckhg.node_type(many.corrupt[i]) == bundle.ckhg.node_type(many.tails[i]));
  }

  // two-entity fixture: the corrupt tail is forced
  InteractionSet inter;
  inter.num_users = 2;
  inter.num_items = 2;
  inter.pairs = {{0, 0}, {1, 1}};
  inter.user_original = {0, 1};
  inter.item_original = {0, 1};
  DataBundle tiny = prepare_data(inter, TripleStore{}, [] {
    TrainConfig c;
    c.max_epochs = 1;
    return c;
  }());
  std::mt19937_64 rng2(1);
  KgBatch tb = sample_kg_batch(tiny.ckhg, 50, rng2);
  for (size_t i = 0; i < tb.heads.size(); ++i) {
    if (tiny.ckhg.node_type(tb.tails[i]) == TripleStore::NodeType::kItem) {
      CHECK(tb.corrupt[i] == (tb.tails[i] == 0 ? 1 : 0));
    }
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto data = synthetic::make_block_dataset(20, 16, 5, 0.9, 3);
  TrainConfig cfg = small_config();
  cfg.max_epochs = 2;
  DataBundle bundle = prepare_data(data.interactions, data.kg, cfg);
  Trainer trainer(cfg, bundle);
  trainer.train();

  Checkpoint ckpt = trainer.make_checkpoint(/*best=*/false);
  std::string path = temp_path("hr_ckpt_test.bin");
  save_checkpoint(path, ckpt);
  Checkpoint loaded = load_checkpoint(path);

  auto a = ckpt.state.named_params();
  auto b = loaded.state.named_params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->vec() == b[i].second->vec());
  }
  REQUIRE(ckpt.optimizer.size() == loaded.optimizer.size());
  for (size_t i = 0; i < ckpt.optimizer.size(); ++i) {
    CHECK(ckpt.optimizer[i].steps == loaded.optimizer[i].steps);
    CHECK(ckpt.optimizer[i].m.vec() == loaded.optimizer[i].m.vec());
    CHECK(ckpt.optimizer[i].v.vec() == loaded.optimizer[i].v.vec());
  }
  CHECK(ckpt.lr == loaded.lr);
  CHECK(ckpt.epoch == loaded.epoch);
  CHECK(ckpt.best_metric == loaded.best_metric);

  // restoring reproduces identical forward outputs bit for bit
  GraphOperators ops = build_operators(bundle.snaps, cfg.model_config());
  Tensor before = trainer.model().score_all(ops);
  Trainer fresh(cfg, bundle);
  fresh.restore(loaded);
  Tensor after = fresh.model().score_all(ops);
  CHECK(before.vec() == after.vec());

  // corrupted file: flip a byte in the middle
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    char c = 'x';
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  // truncated file
  std::string short_path = temp_path("hr_ckpt_short.bin");
  {
    std::ifstream in(path, std::ios::binary);
    std::ofstream out(short_path, std::ios::binary);
    std::vector<char> buf(200);
    in.read(buf.data(), 200);
    out.write(buf.data(), in.gcount());
  }
  CHECK_THROWS_AS(load_checkpoint(short_path), std::runtime_error);

  // not a checkpoint at all
  {
    std::ofstream out(short_path, std::ios::binary);
    out << "definitely not a checkpoint";
  }
  try {
    load_checkpoint(short_path);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("not a checkpoint") != std::string::npos);
  }
  std::remove(path.c_str());
  std::remove(short_path.c_str());
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto data = synthetic::make_block_dataset(20, 16, 5, 0.9, 3);
  TrainConfig cfg = small_config();
  cfg.max_epochs = 3;

  DataBundle b1 = prepare_data(data.interactions, data.kg, cfg);
  Trainer t1(cfg, b1);
  TrainResult r1 = t1.train();

  DataBundle b2 = prepare_data(data.interactions, data.kg, cfg);
  Trainer t2(cfg, b2);
  TrainResult r2 = t2.train();

  CHECK(loss_curve_csv(r1.curve) == loss_curve_csv(r2.curve));
  auto p1 = t1.model().state().named_params();
  auto p2 = t2.model().state().named_params();
  for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second->vec() == p2[i].second->vec());
}

TEST_CASE("no_ccl zeroes the contrastive terms exactly") {
  auto data = synthetic::make_block_dataset(20, 16, 5, 0.9, 3);
  TrainConfig cfg = small_config();
  cfg.max_epochs = 2;
  cfg.no_ccl = true;
  DataBundle bundle = prepare_data(data.interactions, data.kg, cfg);
  Trainer trainer(cfg, bundle);
  TrainResult res = trainer.train();
  for (const EpochLog& e : res.curve) {
    CHECK(e.ssl_u == 0.0);
    CHECK(e.ssl_v == 0.0);
    CHECK(e.total >= e.cf + e.kg);  // only the weight-decay term remains
  }
}

TEST_CASE("loss falls to under half of the first epoch on block data") {
  // two-community dataset; median over three seeds
  int successes = 0;
  for (uint64_t seed : {1, 2, 3}) {
    auto data = synthetic::make_block_dataset(50, 30, 6, 0.9, 100 + seed);
    TrainConfig cfg;
    cfg.embedding_dim = 64;
    cfg.layers = 2;
    cfg.max_epochs = 50;
    cfg.seed = seed;
    cfg.early_stop_patience = 50;
    DataBundle bundle = prepare_data(data.interactions, data.kg, cfg);
    Trainer trainer(cfg, bundle);
    TrainResult res = trainer.train();
    REQUIRE(!res.curve.empty());
    double first = res.curve.front().total;
    double last = res.curve.back().total;
    if (last < 0.5 * first) ++successes;
  }
  CHECK(successes >= 2);  // median over three seeds
}

TEST_CASE("total-loss gradient matches finite differences end to end") {
  auto data = synthetic::make_block_dataset(6, 4, 2, 0.9, 17);
  TrainConfig cfg = small_config();
  cfg.embedding_dim = 2;
  cfg.layers = 1;
  cfg.dropedge_rate = 0.0;
  DataBundle bundle = prepare_data(data.interactions, data.kg, cfg);
  Model model(ModelState::init(cfg.model_config(), bundle.interactions.num_users,
                               bundle.interactions.num_items, bundle.ckhg.total_nodes(),
                               bundle.ckhg.directed_relations(), 5));
  GraphOperators ops = build_operators(bundle.snaps, cfg.model_config());

  CfBatch cf_batch = sample_cf_batch(bundle.split.train, 8, uint64_t{3});
  KgBatch kg_batch = sample_kg_batch(bundle.ckhg, 8, uint64_t{4});
  auto users_local = std::make_shared<IndexVec>(IndexVec{0, 1, 2, 3, 4, 5});
  auto users_global = std::make_shared<IndexVec>();
  for (int64_t u : *users_local) users_global->push_back(bundle.ckhg.num_entities + u);
  auto items_idx = std::make_shared<IndexVec>(IndexVec{0, 1, 2, 3});

  auto params = model.state().named_params();
  std::vector<Tensor> leaves;
  for (auto& [name, t] : params) leaves.push_back(*t);
  auto rep = testutil::fd_check(
      leaves,
      [&](Tape& t, const std::vector<Var>& v) {
        ParamVars pv = map_param_vars(model.state(), v);
        ModelForward fwd = model.forward(t, pv, ops);
        Var u_rows = t.gather_rows(fwd.user_enc.final, std::make_shared<IndexVec>(cf_batch.users));
        Var p_rows = t.gather_rows(fwd.item_fused, std::make_shared<IndexVec>(cf_batch.pos));
        Var n_rows = t.gather_rows(fwd.item_fused, std::make_shared<IndexVec>(cf_batch.neg));
        Var cf = bpr_loss(t, u_rows, p_rows, n_rows);
        Var su = infonce(t, fwd.user_enc.layers, fwd.knowledge_enc.layers, users_local,
                         users_global, cfg.tau);
        Var sv = infonce(t, fwd.item_enc.layers, fwd.knowledge_enc.layers, items_idx, items_idx,
                         cfg.tau);
        Var kg = model.kg_loss(t, pv, kg_batch.heads, kg_batch.rels, kg_batch.tails,
                               kg_batch.corrupt);
        return t.add(t.add(cf, kg), t.scale(t.add(su, sv), cfg.lambda2));
      },
      1e-5);
  // trainer-level tolerance: 1e-3 relative
  CHECK_MESSAGE(rep.max_rel_err < 1e-3, rep.worst);
}

TEST_CASE("each epoch covers the training pairs once in expectation") {
  auto data = synthetic::make_block_dataset(20, 16, 5, 0.9, 3);
  TrainConfig cfg = small_config();
  int64_t n = static_cast<int64_t>(data.interactions.pairs.size());
  cfg.cf_batch = 32;
  int64_t steps = (n + cfg.cf_batch - 1) / cfg.cf_batch;
  CHECK(steps * cfg.cf_batch >= n);
  CHECK(steps * cfg.cf_batch < n + cfg.cf_batch);
}
