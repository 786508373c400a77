#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "hyperrec/eval.hpp"
#include "testutil.hpp"

using namespace hyperrec;

namespace {

// Independent brute-force metric implementations for the dual-route check.
double brute_recall(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant,
                    int64_t k) {
  double hits = 0;
  for (int64_t r : relevant) {
    for (int64_t i = 0; i < k && i < static_cast<int64_t>(ranked.size()); ++i) {
      if (ranked[static_cast<size_t>(i)] == r) hits += 1;
    }
  }
  return hits / static_cast<double>(relevant.size());
}

double brute_ndcg(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant,
                  int64_t k) {
  std::set<int64_t> rel(relevant.begin(), relevant.end());
  double dcg = 0;
  for (int64_t i = 0; i < k && i < static_cast<int64_t>(ranked.size()); ++i) {
    if (rel.count(ranked[static_cast<size_t>(i)])) dcg += std::log(2.0) / std::log(static_cast<double>(i + 2));
  }
  double idcg = 0;
  for (int64_t i = 0; i < k && i < static_cast<int64_t>(rel.size()); ++i) {
    idcg += std::log(2.0) / std::log(static_cast<double>(i + 2));
  }
  return dcg / idcg;
}

InteractionSet empty_set(int64_t users, int64_t items) {
  InteractionSet s;
  s.num_users = users;
  s.num_items = items;
  for (int64_t u = 0; u < users; ++u) s.user_original.push_back(u);
  for (int64_t i = 0; i < items; ++i) s.item_original.push_back(i);
  return s;
}

}  // namespace

TEST_CASE("recall closed forms") {
  CHECK(recall_at_k({1, 2, 3}, {1, 2}, 3) == 1.0);
  CHECK(recall_at_k({0, 9}, {0, 1, 2, 3}, 2) == 0.25);
  CHECK(recall_at_k({5, 6, 7}, {1, 2}, 3) == 0.0);
  CHECK_THROWS_AS(recall_at_k({1}, {}, 1), std::invalid_argument);
}

TEST_CASE("ndcg closed forms") {
  CHECK(ndcg_at_k({4, 1, 2}, {4}, 3) == 1.0);
  CHECK(ndcg_at_k({9, 4}, {4}, 2) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-12));
  CHECK(std::fabs(ndcg_at_k({9, 4}, {4}, 2) - 0.6309) < 1e-4);
  CHECK(ndcg_at_k({1, 2}, {5}, 2) == 0.0);
}

TEST_CASE("metrics agree exactly with the brute-force implementation") {
  auto rng = testutil::make_rng(31);
  for (int fixture = 0; fixture < 50; ++fixture) {
    int64_t n = 10 + static_cast<int64_t>(rng() % 40);
    std::vector<int64_t> ranked(static_cast<size_t>(n));
    std::iota(ranked.begin(), ranked.end(), 0);
    std::shuffle(ranked.begin(), ranked.end(), rng);
    std::vector<int64_t> relevant;
    for (int64_t i = 0; i < n; ++i) {
      if (rng() % 4 == 0) relevant.push_back(i);
    }
    if (relevant.empty()) relevant.push_back(static_cast<int64_t>(rng() % static_cast<uint64_t>(n)));
    for (int64_t k : {1, 5, 10, 25}) {
      CHECK(recall_at_k(ranked, relevant, k) == brute_recall(ranked, relevant, k));
      CHECK(ndcg_at_k(ranked, relevant, k) == doctest::Approx(brute_ndcg(ranked, relevant, k)).epsilon(1e-15));
    }
  }
}

TEST_CASE("metrics are monotone in k and ignore the tail") {
  auto rng = testutil::make_rng(37);
  std::vector<int64_t> ranked(50);
  std::iota(ranked.begin(), ranked.end(), 0);
  std::shuffle(ranked.begin(), ranked.end(), rng);
  std::vector<int64_t> relevant{3, 7, 11, 19};
  double pr = 0, pn = 0;
  for (int64_t k = 1; k <= 50; ++k) {
    double r = recall_at_k(ranked, relevant, k);
    double n = ndcg_at_k(ranked, relevant, k);
    CHECK(r >= pr);
    CHECK(n >= pn - 1e-15);
    pr = r;
    pn = n;
  }
  // permuting items beyond the cutoff changes nothing
  auto permuted = ranked;
  std::shuffle(permuted.begin() + 10, permuted.end(), rng);
  CHECK(recall_at_k(ranked, relevant, 10) == recall_at_k(permuted, relevant, 10));
  CHECK(ndcg_at_k(ranked, relevant, 10) == ndcg_at_k(permuted, relevant, 10));
}

TEST_CASE("evaluate_scores with a perfect oracle yields all ones") {
  InteractionSet train = empty_set(5, 20);
  InteractionSet eval = empty_set(5, 20);
  auto rng = testutil::make_rng(3);
  for (int64_t u = 0; u < 5; ++u) {
    for (int k = 0; k < 4; ++k) {
      eval.pairs.emplace_back(u, static_cast<int64_t>(rng() % 20));
    }
  }
  std::sort(eval.pairs.begin(), eval.pairs.end());
  eval.pairs.erase(std::unique(eval.pairs.begin(), eval.pairs.end()), eval.pairs.end());
  auto by_user = eval.items_by_user();
  Scorer oracle = [&](int64_t u) {
    std::vector<double> s(20, 0.0);
    for (int64_t i : by_user[static_cast<size_t>(u)]) s[static_cast<size_t>(i)] = 1.0;
    return s;
  };
  EvalReport rep = evaluate_scores(oracle, train, eval, {5, 10});
  CHECK(rep.recall.at(10) == 1.0);
  CHECK(rep.ndcg.at(10) == 1.0);
}

TEST_CASE("random scorer lands near the hypergeometric expectation") {
  int64_t users = 1000, items = 100, rel_per_user = 10;
  InteractionSet train = empty_set(users, items);
  InteractionSet eval = empty_set(users, items);
  auto rng = testutil::make_rng(11);
  for (int64_t u = 0; u < users; ++u) {
    std::set<int64_t> rel;
    while (static_cast<int64_t>(rel.size()) < rel_per_user) {
      rel.insert(static_cast<int64_t>(rng() % static_cast<uint64_t>(items)));
    }
    for (int64_t i : rel) eval.pairs.emplace_back(u, i);
  }
  std::sort(eval.pairs.begin(), eval.pairs.end());

  Scorer random_scorer = [&](int64_t u) {
    std::mt19937_64 r(static_cast<uint64_t>(u) * 2654435761ULL + 17);
    std::vector<double> s(static_cast<size_t>(items));
    for (auto& v : s) v = std::uniform_real_distribution<double>(0, 1)(r);
    return s;
  };
  EvalReport rep = evaluate_scores(random_scorer, train, eval, {10});
  // recall@10 per user is Hypergeometric(100, 10, 10)/10
  double mean = 0.1;
  double var_hits = 10.0 * 0.1 * 0.9 * (90.0 / 99.0);
  double sigma = std::sqrt(var_hits / 100.0 / static_cast<double>(users));
  CHECK(std::fabs(rep.recall.at(10) - mean) <= 3 * sigma);
}

TEST_CASE("evaluation masks train positives and is order independent") {
  InteractionSet train = empty_set(3, 6);
  train.pairs = {{0, 0}, {0, 1}, {1, 2}, {2, 3}};
  InteractionSet eval = empty_set(3, 6);
  eval.pairs = {{0, 2}, {1, 0}, {2, 5}};
  // constant scorer: ranking is by item id after masking
  Scorer constant = [&](int64_t) { return std::vector<double>(6, 1.0); };
  EvalReport rep = evaluate_scores(constant, train, eval, {1, 2});
  // user 0: masked {0,1}, ranking 2,3,4,5; relevant {2} at rank 1
  // user 1: masked {2}, ranking 0,1,3,4,5; relevant {0} at rank 1
  // user 2: masked {3}, ranking 0,1,2,4,5; relevant {5} at rank 5
  CHECK(rep.recall.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  std::vector<int64_t> fwd{0, 1, 2}, rev{2, 1, 0};
  EvalReport a = evaluate_scores(constant, train, eval, {1, 2}, &fwd);
  EvalReport b = evaluate_scores(constant, train, eval, {1, 2}, &rev);
  CHECK(a.recall == b.recall);
  CHECK(a.ndcg == b.ndcg);
}

TEST_CASE("cold start subset: bottom decile by train count") {
  InteractionSet train = empty_set(10, 60);
  int64_t item = 0;
  for (int64_t u = 0; u < 10; ++u) {
    for (int64_t k = 0; k <= u; ++k) train.pairs.emplace_back(u, item++ % 60);
  }
  std::sort(train.pairs.begin(), train.pairs.end());
  auto subset = cold_start_users(train);
  REQUIRE(subset.size() == 1);  // ceil(0.1 * 10)
  CHECK(subset[0] == 0);        // the single-interaction user

  // uniform counts: ties broken by ascending user id
  InteractionSet uniform = empty_set(25, 25);
  for (int64_t u = 0; u < 25; ++u) uniform.pairs.emplace_back(u, u);
  auto tie = cold_start_users(uniform);
  REQUIRE(tie.size() == 3);  // ceil(0.1 * 25)
  CHECK(tie == std::vector<int64_t>{0, 1, 2});
}

TEST_CASE("noise injection") {
  InteractionSet train = empty_set(50, 40);
  auto rng = testutil::make_rng(5);
  std::set<std::pair<int64_t, int64_t>> pairs;
  while (pairs.size() < 1000) {
    pairs.emplace(static_cast<int64_t>(rng() % 50), static_cast<int64_t>(rng() % 40));
  }
  train.pairs.assign(pairs.begin(), pairs.end());

  InteractionSet same = inject_noise(train, 0.0, 9);
  CHECK(same.pairs == train.pairs);

  InteractionSet noisy = inject_noise(train, 0.1, 9);
  CHECK(noisy.pairs.size() == train.pairs.size() + 100);
  // injected pairs never collide with the original set
  std::set<std::pair<int64_t, int64_t>> orig(train.pairs.begin(), train.pairs.end());
  int64_t fresh = 0;
  for (const auto& p : noisy.pairs) {
    if (!orig.count(p)) ++fresh;
  }
  CHECK(fresh == 100);

  InteractionSet again = inject_noise(train, 0.1, 9);
  CHECK(again.pairs == noisy.pairs);

  // not enough free pairs
  InteractionSet full = empty_set(2, 2);
  full.pairs = {{0, 0}, {0, 1}, {1, 0}};
  CHECK_THROWS_AS(inject_noise(full, 0.5, 1), std::runtime_error);
}

TEST_CASE("training data ablation") {
  InteractionSet train = empty_set(10, 30);
  auto rng = testutil::make_rng(8);
  std::set<std::pair<int64_t, int64_t>> pairs;
  for (int64_t u = 0; u < 10; ++u) pairs.emplace(u, static_cast<int64_t>(rng() % 30));
  while (pairs.size() < 100) {
    pairs.emplace(static_cast<int64_t>(rng() % 10), static_cast<int64_t>(rng() % 30));
  }
  train.pairs.assign(pairs.begin(), pairs.end());

  InteractionSet cut = ablate_training_data(train, 0.5, 3);
  CHECK(cut.pairs.size() >= 50 - 10);
  CHECK(cut.pairs.size() <= 50 + 10);
  auto counts = cut.interaction_count_by_user();
  for (int64_t c : counts) CHECK(c >= 1);

  InteractionSet again = ablate_training_data(train, 0.5, 3);
  CHECK(again.pairs == cut.pairs);
  CHECK_THROWS_AS(ablate_training_data(train, 0.0, 1), std::invalid_argument);
}

TEST_CASE("report serialization") {
  EvalReport rep;
  rep.protocol = "standard";
  rep.seed = 7;
  rep.ks = {10, 20};
  rep.recall[10] = 0.25;
  rep.recall[20] = 0.5;
  rep.ndcg[10] = 0.1;
  rep.ndcg[20] = 0.2;
  rep.config_digest = "abc";
  std::string json = report_to_json(rep);
  CHECK(json.find("\"protocol\": \"standard\"") != std::string::npos);
  CHECK(json.find("\"10\": 0.25") != std::string::npos);
  CHECK(json.find("\"config_digest\": \"abc\"") != std::string::npos);
}
