#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hyperrec/dataset.hpp"
#include "hyperrec/model.hpp"

namespace hyperrec {

struct EvalReport {
  std::string protocol = "standard";
  uint64_t seed = 0;
  std::vector<int64_t> ks;
  std::map<int64_t, double> recall;
  std::map<int64_t, double> ndcg;
  std::string config_digest;
  int64_t users_evaluated = 0;
};

// |relevant ∩ top-k| / |relevant|; relevant must be non-empty.
double recall_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant,
                   int64_t k);
// Binary-relevance DCG@k / IDCG@k with log2(i+1) discounts.
double ndcg_at_k(const std::vector<int64_t>& ranked, const std::vector<int64_t>& relevant,
                 int64_t k);

// Scores for every item, for one user. Called concurrently across users.
using Scorer = std::function<std::vector<double>(int64_t user)>;

// Ranks all items per user with train positives masked out (ties broken by
// ascending item id), averages the metrics over users that have at least one
// relevant interaction in `eval_set` (restricted to `user_subset` if given).
EvalReport evaluate_scores(const Scorer& scorer, const InteractionSet& train,
                           const InteractionSet& eval_set, const std::vector<int64_t>& ks,
                           const std::vector<int64_t>* user_subset = nullptr);

// Model-backed evaluation over frozen parameters.
EvalReport evaluate_model(const Model& model, const GraphOperators& ops,
                          const InteractionSet& train, const InteractionSet& eval_set,
                          const std::vector<int64_t>& ks,
                          const std::vector<int64_t>* user_subset = nullptr);

// Bottom decile of users by training interaction count (ties by ascending
// user id), exactly ceil(0.1 |U|) users.
std::vector<int64_t> cold_start_users(const InteractionSet& train);

// Adds floor(level * |train|) uniformly random non-interacted pairs as false
// positives; never duplicates an existing or injected pair.
InteractionSet inject_noise(const InteractionSet& train, double level, uint64_t seed);

// Uniformly removes `fraction` of the training pairs while every user keeps
// at least one interaction.
InteractionSet ablate_training_data(const InteractionSet& train, double fraction, uint64_t seed);

void write_report_json(const std::string& path, const EvalReport& report);
void write_report_csv(const std::string& path, const EvalReport& report);
std::string report_to_json(const EvalReport& report);

}  // namespace hyperrec
