#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperrec/dataset.hpp"
#include "hyperrec/model.hpp"
#include "hyperrec/optim.hpp"

namespace hyperrec {

// Flat key=value configuration; unknown keys are rejected. The tuned values
// are restricted to their search grids.
struct TrainConfig {
  int64_t embedding_dim = 64;
  int64_t layers = 2;            // {1, 2, 3, 4}
  double lr = 1e-2;              // {1e-1, 1e-2, 1e-3}
  double lambda1 = 1e-4;         // {1, 0.1, 1e-2, 1e-3, 1e-4}
  double lambda2 = 1e-2;         // {0.1, 1e-2, 1e-3, 1e-4, 1e-5}
  double tau = 0.2;              // {0.1, 0.2, 1, 2, 10}
  int64_t cf_batch = 4096;
  int64_t kg_batch = 8192;
  int64_t max_epochs = 500;
  uint64_t seed = 1;
  double dropedge_rate = 0.1;
  int64_t plateau_patience = 20;
  double plateau_factor = 0.5;
  double lr_floor = 1e-5;
  int64_t early_stop_patience = 50;
  double train_ratio = 0.7;
  double val_ratio = 0.1;
  double test_ratio = 0.2;
  double rating_threshold = 0.0;
  bool no_ccl = false;
  bool no_hyper = false;
  bool no_global = false;
  bool no_attention = false;
  bool laplacian_conv = true;
  bool shared_layer_params = false;

  static TrainConfig parse_file(const std::string& path);
  static TrainConfig parse_text(const std::string& text);
  std::string to_text() const;
  std::string digest() const;  // FNV-1a over the canonical text
  ModelConfig model_config() const;
  void validate() const;
};

struct CfBatch {
  std::vector<int64_t> users, pos, neg;
};
// Positives uniform over the training pairs (with replacement); one negative
// per positive, uniform over the user's non-interacted items. A user
// interacting with every item fails after 100 resamples.
CfBatch sample_cf_batch(const InteractionSet& train, int64_t size, std::mt19937_64& rng);
CfBatch sample_cf_batch(const InteractionSet& train, int64_t size, uint64_t seed);

struct KgBatch {
  std::vector<int64_t> heads, rels, tails, corrupt;
};
// Corrupted tails are drawn uniformly from the tail's node-type range and
// never form an existing triple.
KgBatch sample_kg_batch(const TripleStore& ckhg, int64_t size, std::mt19937_64& rng);
KgBatch sample_kg_batch(const TripleStore& ckhg, int64_t size, uint64_t seed);

// Everything the trainer consumes, derived from the raw files once.
struct DataBundle {
  InteractionSet interactions;  // full set
  DatasetSplit split;
  TripleStore kg;    // knowledge triples without users
  TripleStore ckhg;  // unified store over split.train
  SnapshotSet snaps;
};

DataBundle prepare_data(InteractionSet interactions, TripleStore kg, const TrainConfig& config);
// Rebuilds ckhg + snapshots after split.train was modified (noise, ablation).
void rebuild_graph(DataBundle& data);

struct EpochLog {
  int64_t epoch = 0;
  double cf = 0, kg = 0, ssl_u = 0, ssl_v = 0, total = 0;
  double lr = 0;
  double val_recall20 = 0;
};

struct TrainResult {
  std::vector<EpochLog> curve;
  int64_t best_epoch = -1;
  double best_val_recall20 = 0;
  int64_t epochs_run = 0;
};

std::string loss_curve_csv(const std::vector<EpochLog>& curve);

struct Checkpoint {
  std::string config_text;
  int64_t num_users = 0, num_items = 0, num_nodes = 0, num_relations = 0;
  ModelState state;
  struct OptSlot {
    std::string name;
    Tensor m, v;
    int64_t steps = 0;
  };
  std::vector<OptSlot> optimizer;
  double lr = 0;
  double weight_decay = 0;
  int64_t epoch = 0;
  double best_metric = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

class Trainer {
 public:
  Trainer(TrainConfig config, const DataBundle& data);

  // Runs the full loop: per epoch DropEdge-augmented forward passes, one
  // optimizer step per interaction batch and per knowledge batch, validation
  // recall, plateau scheduling and early stopping. Aborts with a diagnostic
  // naming the term and epoch if a loss turns non-finite.
  TrainResult train();

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const ModelState& best_state() const { return best_state_; }
  Checkpoint make_checkpoint(bool best = true) const;
  void restore(const Checkpoint& ckpt);

 private:
  double run_cf_phase(const GraphOperators& ops, int64_t epoch, double* ssl_u, double* ssl_v);
  double run_kg_phase(int64_t epoch);
  double validation_recall20(const GraphOperators& clean_ops);

  TrainConfig config_;
  const DataBundle& data_;
  Model model_;
  AdamOptimizer optimizer_;
  std::vector<int> all_param_ids_;
  int entity_param_id_ = -1;
  std::vector<int> rel_w_ids_, rel_e_ids_;
  std::mt19937_64 rng_;
  ModelState best_state_;
  int64_t best_epoch_ = -1;
  double best_metric_ = 0;
};

}  // namespace hyperrec
