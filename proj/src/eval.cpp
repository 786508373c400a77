#include "hyperrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace hyperrec {

namespace {

std::vector<char> relevance_mask(const std::vector<int64_t>& relevant, int64_t num_items) {
  std::vector<char> mask(static_cast<size_t>(num_items), 0);
  for (int64_t i : relevant) mask[static_cast<size_t>(i)] = 1;
  return mask;
}

}  // namespace

double recall_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant,
                   int64_t k) {
  if (relevant.empty()) throw std::invalid_argument("recall_at_k: empty relevant set");
  std::set<int64_t> rel(relevant.begin(), relevant.end());
  int64_t hits = 0;
  for (int64_t i = 0; i < std::min<int64_t>(k, static_cast<int64_t>(ranked.size())); ++i) {
    if (rel.count(ranked[static_cast<size_t>(i)])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

double ndcg_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant,
                 int64_t k) {
  if (relevant.empty()) throw std::invalid_argument("ndcg_at_k: empty relevant set");
  std::set<int64_t> rel(relevant.begin(), relevant.end());
  double dcg = 0;
  for (int64_t i = 0; i < std::min<int64_t>(k, static_cast<int64_t>(ranked.size())); ++i) {
    if (rel.count(ranked[static_cast<size_t>(i)])) {
      dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
  }
  double idcg = 0;
  int64_t ideal = std::min<int64_t>(k, static_cast<int64_t>(rel.size()));
  for (int64_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

EvalReport evaluate_scores(const Scorer& scorer, const InteractionSet& train,
                           const InteractionSet& eval_set, const std::vector<int64_t>& ks,
                           const std::vector<int64_t>* user_subset) {
  EvalReport report;
  report.ks = ks;

  std::vector<char> in_subset;
  if (user_subset) {
    in_subset.assign(static_cast<size_t>(train.num_users), 0);
    for (int64_t u : *user_subset) in_subset[static_cast<size_t>(u)] = 1;
  }
  auto train_by_user = train.items_by_user();
  auto eval_by_user = eval_set.items_by_user();

  std::vector<int64_t> users;
  for (int64_t u = 0; u < train.num_users; ++u) {
    if (user_subset && !in_subset[static_cast<size_t>(u)]) continue;
    if (eval_by_user[static_cast<size_t>(u)].empty()) continue;  // no relevant items: skipped
    users.push_back(u);
  }

  std::map<int64_t, std::vector<double>> recall_per_user, ndcg_per_user;
  for (int64_t k : ks) {
    recall_per_user[k].assign(users.size(), 0.0);
    ndcg_per_user[k].assign(users.size(), 0.0);
  }

  int64_t max_k = ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end());
  bool bad_scorer = false;
#pragma omp parallel for schedule(static)
  for (int64_t ui = 0; ui < static_cast<int64_t>(users.size()); ++ui) {
    int64_t u = users[static_cast<size_t>(ui)];
    std::vector<double> scores = scorer(u);
    if (static_cast<int64_t>(scores.size()) != train.num_items) {
      bad_scorer = true;
      continue;
    }
    for (int64_t i : train_by_user[static_cast<size_t>(u)]) {
      scores[static_cast<size_t>(i)] = -std::numeric_limits<double>::infinity();
    }
    // top max_k by (score desc, id asc)
    std::vector<int64_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    int64_t top = std::min<int64_t>(max_k, static_cast<int64_t>(order.size()));
    std::partial_sort(order.begin(), order.begin() + top, order.end(),
                      [&](int64_t a, int64_t b) {
                        double sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
                        return sa != sb ? sa > sb : a < b;
                      });
    order.resize(static_cast<size_t>(top));
    const auto& relevant = eval_by_user[static_cast<size_t>(u)];
    for (int64_t k : ks) {
      recall_per_user[k][static_cast<size_t>(ui)] = recall_at_k(order, relevant, k);
      ndcg_per_user[k][static_cast<size_t>(ui)] = ndcg_at_k(order, relevant, k);
    }
  }

  if (bad_scorer) {
    throw std::runtime_error("evaluate: scorer did not return one score per item");
  }
  report.users_evaluated = static_cast<int64_t>(users.size());
  for (int64_t k : ks) {
    double r = 0, n = 0;
    for (size_t i = 0; i < users.size(); ++i) {
      r += recall_per_user[k][i];
      n += ndcg_per_user[k][i];
    }
    int64_t cnt = std::max<int64_t>(1, static_cast<int64_t>(users.size()));
    report.recall[k] = r / static_cast<double>(cnt);
    report.ndcg[k] = n / static_cast<double>(cnt);
  }
  return report;
}

EvalReport evaluate_model(const Model& model, const GraphOperators& ops,
                          const InteractionSet& train, const InteractionSet& eval_set,
                          const std::vector<int64_t>& ks,
                          const std::vector<int64_t>* user_subset) {
  Tensor scores = model.score_all(ops);
  Scorer scorer = [&scores](int64_t user) {
    std::vector<double> row(static_cast<size_t>(scores.cols()));
    for (int64_t i = 0; i < scores.cols(); ++i) row[static_cast<size_t>(i)] = scores.at(user, i);
    return row;
  };
  return evaluate_scores(scorer, train, eval_set, ks, user_subset);
}

std::vector<int64_t> cold_start_users(const InteractionSet& train) {
  auto counts = train.interaction_count_by_user();
  std::vector<int64_t> users(static_cast<size_t>(train.num_users));
  std::iota(users.begin(), users.end(), 0);
  std::sort(users.begin(), users.end(), [&](int64_t a, int64_t b) {
    return counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)]
               ? counts[static_cast<size_t>(a)] < counts[static_cast<size_t>(b)]
               : a < b;
  });
  int64_t take = (train.num_users + 9) / 10;  // ceil(0.1 |U|)
  users.resize(static_cast<size_t>(take));
  std::sort(users.begin(), users.end());
  return users;
}

InteractionSet inject_noise(const InteractionSet& train, double level, uint64_t seed) {
  if (level < 0) throw std::invalid_argument("inject_noise: negative level");
  int64_t want = static_cast<int64_t>(std::floor(level * static_cast<double>(train.pairs.size())));
  int64_t capacity = train.num_users * train.num_items - static_cast<int64_t>(train.pairs.size());
  if (want > capacity) {
    throw std::runtime_error("inject_noise: only " + std::to_string(capacity) +
                             " non-interacted pairs available, need " + std::to_string(want));
  }
  InteractionSet out = train;
  std::set<std::pair<int64_t, int64_t>> taken(train.pairs.begin(), train.pairs.end());
  std::mt19937_64 rng(seed);
  int64_t added = 0;
  while (added < want) {
    int64_t u = static_cast<int64_t>(rng() % static_cast<uint64_t>(train.num_users));
    int64_t i = static_cast<int64_t>(rng() % static_cast<uint64_t>(train.num_items));
    if (taken.emplace(u, i).second) {
      out.pairs.emplace_back(u, i);
      ++added;
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

InteractionSet ablate_training_data(const InteractionSet& train, double fraction, uint64_t seed) {
  if (fraction <= 0 || fraction >= 1) {
    throw std::invalid_argument("ablate_training_data: fraction must be in (0,1)");
  }
  int64_t remove = static_cast<int64_t>(std::floor(fraction * static_cast<double>(train.pairs.size())));
  std::vector<size_t> order(train.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  auto counts = train.interaction_count_by_user();
  std::vector<char> removed(train.pairs.size(), 0);
  int64_t done = 0;
  for (size_t pos : order) {
    if (done >= remove) break;
    int64_t u = train.pairs[pos].first;
    if (counts[static_cast<size_t>(u)] <= 1) continue;  // keep the user's last interaction
    removed[pos] = 1;
    --counts[static_cast<size_t>(u)];
    ++done;
  }
  InteractionSet out = train;
  out.pairs.clear();
  for (size_t i = 0; i < train.pairs.size(); ++i) {
    if (!removed[i]) out.pairs.push_back(train.pairs[i]);
  }
  return out;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["protocol"] = report.protocol;
  j["seed"] = report.seed;
  j["ks"] = report.ks;
  nlohmann::json rec = nlohmann::json::object(), nd = nlohmann::json::object();
  for (const auto& [k, v] : report.recall) rec[std::to_string(k)] = v;
  for (const auto& [k, v] : report.ndcg) nd[std::to_string(k)] = v;
  j["recall"] = rec;
  j["ndcg"] = nd;
  j["config_digest"] = report.config_digest;
  j["users_evaluated"] = report.users_evaluated;
  return j.dump(2);
}

void write_report_json(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report_json: cannot open " + path);
  out << report_to_json(report) << '\n';
}

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report_csv: cannot open " + path);
  out << "protocol,k,recall,ndcg,seed,config_digest\n";
  char buf[64];
  for (int64_t k : report.ks) {
    out << report.protocol << ',' << k << ',';
    std::snprintf(buf, sizeof buf, "%.17g", report.recall.at(k));
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", report.ndcg.at(k));
    out << buf << ',' << report.seed << ',' << report.config_digest << '\n';
  }
}

}  // namespace hyperrec
