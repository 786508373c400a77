#include "hyperrec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hyperrec/eval.hpp"

namespace hyperrec {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool near(double a, double b) { return std::fabs(a - b) <= 1e-12 * std::max(1.0, std::fabs(b)); }

void need_in_grid(double v, std::initializer_list<double> grid, const char* key) {
  for (double g : grid) {
    if (near(v, g)) return;
  }
  std::string msg = std::string("config: ") + key + "=" + format_double(v) +
                    " is outside the search grid {";
  bool first = true;
  for (double g : grid) {
    if (!first) msg += ", ";
    msg += format_double(g);
    first = false;
  }
  throw std::invalid_argument(msg + "}");
}

}  // namespace

TrainConfig TrainConfig::parse_text(const std::string& text) {
  TrainConfig cfg;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  auto set_i64 = [](int64_t* dst) {
    return [dst](const std::string& v) { *dst = std::stoll(v); };
  };
  auto set_u64 = [](uint64_t* dst) {
    return [dst](const std::string& v) { *dst = std::stoull(v); };
  };
  auto set_f64 = [](double* dst) {
    return [dst](const std::string& v) { *dst = std::stod(v); };
  };
  auto set_bool = [](bool* dst) {
    return [dst](const std::string& v) {
      if (v == "1" || v == "true") {
        *dst = true;
      } else if (v == "0" || v == "false") {
        *dst = false;
      } else {
        throw std::invalid_argument("expected 0/1/true/false, got '" + v + "'");
      }
    };
  };
  setters["embedding_dim"] = set_i64(&cfg.embedding_dim);
  setters["layers"] = set_i64(&cfg.layers);
  setters["lr"] = set_f64(&cfg.lr);
  setters["lambda1"] = set_f64(&cfg.lambda1);
  setters["lambda2"] = set_f64(&cfg.lambda2);
  setters["tau"] = set_f64(&cfg.tau);
  setters["cf_batch"] = set_i64(&cfg.cf_batch);
  setters["kg_batch"] = set_i64(&cfg.kg_batch);
  setters["max_epochs"] = set_i64(&cfg.max_epochs);
  setters["seed"] = set_u64(&cfg.seed);
  setters["dropedge_rate"] = set_f64(&cfg.dropedge_rate);
  setters["plateau_patience"] = set_i64(&cfg.plateau_patience);
  setters["plateau_factor"] = set_f64(&cfg.plateau_factor);
  setters["lr_floor"] = set_f64(&cfg.lr_floor);
  setters["early_stop_patience"] = set_i64(&cfg.early_stop_patience);
  setters["train_ratio"] = set_f64(&cfg.train_ratio);
  setters["val_ratio"] = set_f64(&cfg.val_ratio);
  setters["test_ratio"] = set_f64(&cfg.test_ratio);
  setters["rating_threshold"] = set_f64(&cfg.rating_threshold);
  setters["no_ccl"] = set_bool(&cfg.no_ccl);
  setters["no_hyper"] = set_bool(&cfg.no_hyper);
  setters["no_global"] = set_bool(&cfg.no_global);
  setters["no_attention"] = set_bool(&cfg.no_attention);
  setters["laplacian_conv"] = set_bool(&cfg.laplacian_conv);
  setters["shared_layer_params"] = set_bool(&cfg.shared_layer_params);

  std::istringstream in(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value, got '" + t + "'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" +
                                  key + "'");
    }
    try {
      it->second(value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + " (" + key +
                                  "): " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

void TrainConfig::validate() const {
  if (embedding_dim < 1) throw std::invalid_argument("config: embedding_dim must be >= 1");
  if (layers < 1 || layers > 4) throw std::invalid_argument("config: layers must be in {1,2,3,4}");
  need_in_grid(lr, {1e-1, 1e-2, 1e-3}, "lr");
  need_in_grid(lambda1, {1.0, 0.1, 1e-2, 1e-3, 1e-4}, "lambda1");
  need_in_grid(lambda2, {0.1, 1e-2, 1e-3, 1e-4, 1e-5}, "lambda2");
  need_in_grid(tau, {0.1, 0.2, 1.0, 2.0, 10.0}, "tau");
  if (cf_batch < 1 || kg_batch < 1) throw std::invalid_argument("config: batch sizes must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("config: max_epochs must be >= 1");
  if (dropedge_rate < 0 || dropedge_rate >= 1) {
    throw std::invalid_argument("config: dropedge_rate must be in [0,1)");
  }
  if (plateau_patience < 1 || early_stop_patience < 1) {
    throw std::invalid_argument("config: patience values must be >= 1");
  }
  if (plateau_factor <= 0 || plateau_factor > 1) {
    throw std::invalid_argument("config: plateau_factor must be in (0,1]");
  }
  if (lr_floor <= 0) throw std::invalid_argument("config: lr_floor must be positive");
  double sum = train_ratio + val_ratio + test_ratio;
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("config: split ratios sum to " + format_double(sum));
  }
  if (train_ratio <= 0) throw std::invalid_argument("config: train_ratio must be positive");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << "embedding_dim=" << embedding_dim << '\n';
  out << "layers=" << layers << '\n';
  out << "lr=" << format_double(lr) << '\n';
  out << "lambda1=" << format_double(lambda1) << '\n';
  out << "lambda2=" << format_double(lambda2) << '\n';
  out << "tau=" << format_double(tau) << '\n';
  out << "cf_batch=" << cf_batch << '\n';
  out << "kg_batch=" << kg_batch << '\n';
  out << "max_epochs=" << max_epochs << '\n';
  out << "seed=" << seed << '\n';
  out << "dropedge_rate=" << format_double(dropedge_rate) << '\n';
  out << "plateau_patience=" << plateau_patience << '\n';
  out << "plateau_factor=" << format_double(plateau_factor) << '\n';
  out << "lr_floor=" << format_double(lr_floor) << '\n';
  out << "early_stop_patience=" << early_stop_patience << '\n';
  out << "train_ratio=" << format_double(train_ratio) << '\n';
  out << "val_ratio=" << format_double(val_ratio) << '\n';
  out << "test_ratio=" << format_double(test_ratio) << '\n';
  out << "rating_threshold=" << format_double(rating_threshold) << '\n';
  out << "no_ccl=" << (no_ccl ? 1 : 0) << '\n';
  out << "no_hyper=" << (no_hyper ? 1 : 0) << '\n';
  out << "no_global=" << (no_global ? 1 : 0) << '\n';
  out << "no_attention=" << (no_attention ? 1 : 0) << '\n';
  out << "laplacian_conv=" << (laplacian_conv ? 1 : 0) << '\n';
  out << "shared_layer_params=" << (shared_layer_params ? 1 : 0) << '\n';
  return out.str();
}

std::string TrainConfig::digest() const {
  uint64_t h = 1469598103934665603ULL;
  for (char c : to_text()) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig mc;
  mc.dim = embedding_dim;
  mc.layers = layers;
  mc.laplacian_conv = laplacian_conv;
  mc.shared_layer_params = shared_layer_params;
  mc.ablate_hypergraph = no_hyper;
  mc.ablate_global = no_global;
  mc.ablate_attention_fusion = no_attention;
  return mc;
}

CfBatch sample_cf_batch(const InteractionSet& train, int64_t size, std::mt19937_64& rng) {
  if (train.pairs.empty()) throw std::invalid_argument("sample_cf_batch: empty training set");
  CfBatch batch;
  batch.users.reserve(static_cast<size_t>(size));
  for (int64_t k = 0; k < size; ++k) {
    const auto& [u, pos] =
        train.pairs[static_cast<size_t>(rng() % train.pairs.size())];
    int64_t neg = -1;
    for (int attempt = 0; attempt < 100; ++attempt) {
      int64_t cand = static_cast<int64_t>(rng() % static_cast<uint64_t>(train.num_items));
      if (!train.contains(u, cand)) {
        neg = cand;
        break;
      }
    }
    if (neg < 0) {
      throw std::runtime_error("sample_cf_batch: user " + std::to_string(u) +
                               " has no non-interacted item after 100 draws");
    }
    batch.users.push_back(u);
    batch.pos.push_back(pos);
    batch.neg.push_back(neg);
  }
  return batch;
}

CfBatch sample_cf_batch(const InteractionSet& train, int64_t size, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_cf_batch(train, size, rng);
}

KgBatch sample_kg_batch(const TripleStore& ckhg, int64_t size, std::mt19937_64& rng) {
  if (ckhg.triples.empty()) throw std::invalid_argument("sample_kg_batch: empty triple store");
  auto type_range = [&](int64_t node) -> std::pair<int64_t, int64_t> {
    switch (ckhg.node_type(node)) {
      case TripleStore::NodeType::kItem:
        return {0, ckhg.num_items};
      case TripleStore::NodeType::kEntity:
        return {ckhg.num_items, ckhg.num_entities};
      case TripleStore::NodeType::kUser:
        return {ckhg.num_entities, ckhg.total_nodes()};
    }
    return {0, 0};
  };
  KgBatch batch;
  for (int64_t k = 0; k < size; ++k) {
    const auto& t = ckhg.triples[static_cast<size_t>(rng() % ckhg.triples.size())];
    auto [lo, hi] = type_range(t.tail);
    if (hi - lo <= 1) {
      throw std::runtime_error("sample_kg_batch: node type of tail " + std::to_string(t.tail) +
                               " has a single entity; cannot corrupt");
    }
    int64_t corrupt = -1;
    for (int attempt = 0; attempt < 100; ++attempt) {
      int64_t cand = lo + static_cast<int64_t>(rng() % static_cast<uint64_t>(hi - lo));
      if (cand == t.tail) continue;
      if (!std::binary_search(ckhg.triples.begin(), ckhg.triples.end(),
                              TripleStore::Triple{t.head, t.rel, cand})) {
        corrupt = cand;
        break;
      }
    }
    if (corrupt < 0) {
      throw std::runtime_error("sample_kg_batch: no valid corruption for head " +
                               std::to_string(t.head) + " after 100 draws");
    }
    batch.heads.push_back(t.head);
    batch.rels.push_back(t.rel);
    batch.tails.push_back(t.tail);
    batch.corrupt.push_back(corrupt);
  }
  return batch;
}

KgBatch sample_kg_batch(const TripleStore& ckhg, int64_t size, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_kg_batch(ckhg, size, rng);
}

DataBundle prepare_data(InteractionSet interactions, TripleStore kg, const TrainConfig& config) {
  DataBundle data;
  data.interactions = std::move(interactions);
  data.kg = std::move(kg);
  data.split = split_dataset(data.interactions,
                             {config.train_ratio, config.val_ratio, config.test_ratio},
                             config.seed);
  rebuild_graph(data);
  return data;
}

void rebuild_graph(DataBundle& data) {
  data.ckhg = build_ckhg(data.split.train, data.kg);
  data.snaps = build_snapshots(data.ckhg);
}

std::string loss_curve_csv(const std::vector<EpochLog>& curve) {
  std::ostringstream out;
  out << "epoch,cf,kg,ssl_u,ssl_v,total,lr,val_recall20\n";
  for (const EpochLog& e : curve) {
    out << e.epoch << ',' << format_double(e.cf) << ',' << format_double(e.kg) << ','
        << format_double(e.ssl_u) << ',' << format_double(e.ssl_v) << ','
        << format_double(e.total) << ',' << format_double(e.lr) << ','
        << format_double(e.val_recall20) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'H', 'R', 'E', 'C', 'C', 'K', 'P', '1'};

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u64(std::ostream& out, uint64_t v) { write_bytes(out, &v, sizeof v); }
void write_i64(std::ostream& out, int64_t v) { write_bytes(out, &v, sizeof v); }
void write_f64(std::ostream& out, double v) { write_bytes(out, &v, sizeof v); }

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  write_bytes(out, s.data(), s.size());
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u64(out, static_cast<uint64_t>(t.rank()));
  for (int64_t i = 0; i < t.rank(); ++i) write_i64(out, t.dim(i));
  write_bytes(out, t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
}

void read_bytes(std::istream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) {
    throw std::runtime_error("checkpoint: truncated file");
  }
}

uint64_t read_u64(std::istream& in) {
  uint64_t v;
  read_bytes(in, &v, sizeof v);
  return v;
}
int64_t read_i64(std::istream& in) {
  int64_t v;
  read_bytes(in, &v, sizeof v);
  return v;
}
double read_f64(std::istream& in) {
  double v;
  read_bytes(in, &v, sizeof v);
  return v;
}

std::string read_string(std::istream& in) {
  uint64_t n = read_u64(in);
  if (n > (1ULL << 30)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  read_bytes(in, s.data(), n);
  return s;
}

Tensor read_tensor(std::istream& in) {
  uint64_t rank = read_u64(in);
  if (rank > 8) throw std::runtime_error("checkpoint: corrupt tensor rank");
  std::vector<int64_t> shape;
  int64_t numel = 1;
  for (uint64_t i = 0; i < rank; ++i) {
    int64_t d = read_i64(in);
    if (d < 0 || d > (1LL << 32)) throw std::runtime_error("checkpoint: corrupt tensor extent");
    shape.push_back(d);
    numel *= d;
  }
  Tensor t(shape);
  read_bytes(in, t.data(), static_cast<size_t>(numel) * sizeof(double));
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  write_bytes(out, kMagic, sizeof kMagic);
  write_string(out, ckpt.config_text);
  write_i64(out, ckpt.num_users);
  write_i64(out, ckpt.num_items);
  write_i64(out, ckpt.num_nodes);
  write_i64(out, ckpt.num_relations);

  auto params = ckpt.state.named_params();
  write_u64(out, params.size());
  for (const auto& [name, t] : params) {
    write_string(out, name);
    write_tensor(out, *t);
  }
  write_u64(out, ckpt.optimizer.size());
  for (const auto& slot : ckpt.optimizer) {
    write_string(out, slot.name);
    write_i64(out, slot.steps);
    write_tensor(out, slot.m);
    write_tensor(out, slot.v);
  }
  write_f64(out, ckpt.lr);
  write_f64(out, ckpt.weight_decay);
  write_i64(out, ckpt.epoch);
  write_f64(out, ckpt.best_metric);
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  read_bytes(in, magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw std::runtime_error("load_checkpoint: " + path +
                             " is not a checkpoint or has an unsupported version");
  }
  Checkpoint ckpt;
  ckpt.config_text = read_string(in);
  ckpt.num_users = read_i64(in);
  ckpt.num_items = read_i64(in);
  ckpt.num_nodes = read_i64(in);
  ckpt.num_relations = read_i64(in);

  TrainConfig cfg = TrainConfig::parse_text(ckpt.config_text);
  ckpt.state = ModelState::init(cfg.model_config(), ckpt.num_users, ckpt.num_items,
                                ckpt.num_nodes, ckpt.num_relations, 0);
  auto params = ckpt.state.named_params();
  uint64_t nparams = read_u64(in);
  if (nparams != params.size()) {
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  }
  for (auto& [name, tensor] : params) {
    std::string got = read_string(in);
    if (got != name) {
      throw std::runtime_error("load_checkpoint: expected parameter '" + name + "', found '" +
                               got + "'");
    }
    Tensor loaded = read_tensor(in);
    if (!loaded.same_shape(*tensor)) {
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    }
    *tensor = std::move(loaded);
  }
  uint64_t nslots = read_u64(in);
  for (uint64_t i = 0; i < nslots; ++i) {
    Checkpoint::OptSlot slot;
    slot.name = read_string(in);
    slot.steps = read_i64(in);
    slot.m = read_tensor(in);
    slot.v = read_tensor(in);
    ckpt.optimizer.push_back(std::move(slot));
  }
  ckpt.lr = read_f64(in);
  ckpt.weight_decay = read_f64(in);
  ckpt.epoch = read_i64(in);
  ckpt.best_metric = read_f64(in);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, const DataBundle& data)
    : config_(std::move(config)),
      data_(data),
      model_(ModelState::init(config_.model_config(), data.interactions.num_users,
                              data.interactions.num_items, data.ckhg.total_nodes(),
                              data.ckhg.directed_relations(), config_.seed)),
      optimizer_(config_.lr, config_.lambda1),
      rng_(config_.seed) {
  for (auto& [name, tensor] : model_.state().named_params()) {
    int id = optimizer_.add_param(name, tensor);
    all_param_ids_.push_back(id);
    if (name == "entity_table") entity_param_id_ = id;
    if (name.rfind("rel_w", 0) == 0) rel_w_ids_.push_back(id);
    if (name.rfind("rel_e", 0) == 0) rel_e_ids_.push_back(id);
  }
  best_state_ = model_.state();
}

double Trainer::validation_recall20(const GraphOperators& clean_ops) {
  EvalReport report = evaluate_model(model_, clean_ops, data_.split.train,
                                     data_.split.validation, {20});
  return report.users_evaluated > 0 ? report.recall.at(20) : 0.0;
}

namespace {

// Sorted distinct ids, padded with uniform draws up to min(floor, universe).
std::vector<int64_t> pad_distinct(std::vector<int64_t> ids, int64_t universe, int64_t floor_size,
                                  std::mt19937_64& rng) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  int64_t target = std::min<int64_t>(floor_size, universe);
  if (static_cast<int64_t>(ids.size()) >= target) return ids;
  std::set<int64_t> have(ids.begin(), ids.end());
  while (static_cast<int64_t>(have.size()) < target) {
    have.insert(static_cast<int64_t>(rng() % static_cast<uint64_t>(universe)));
  }
  return std::vector<int64_t>(have.begin(), have.end());
}

constexpr int64_t kSslBatchFloor = 256;

}  // namespace

double Trainer::run_cf_phase(const GraphOperators& ops, int64_t epoch, double* ssl_u,
                             double* ssl_v) {
  const InteractionSet& train = data_.split.train;
  int64_t steps = (static_cast<int64_t>(train.pairs.size()) + config_.cf_batch - 1) /
                  config_.cf_batch;
  bool use_ssl = !config_.no_ccl && !config_.no_global && config_.lambda2 > 0;
  int64_t entity_offset = data_.ckhg.num_entities;

  double cf_sum = 0, su_sum = 0, sv_sum = 0;
  for (int64_t step = 0; step < steps; ++step) {
    CfBatch batch = sample_cf_batch(train, config_.cf_batch, rng_);

    Tape tape;
    std::vector<Var> flat = model_.bind_flat(tape);
    ParamVars pv = map_param_vars(model_.state(), flat);
    ModelForward fwd = model_.forward(tape, pv, ops);

    Var u_rows = tape.gather_rows(fwd.user_enc.final, std::make_shared<IndexVec>(batch.users));
    Var p_rows = tape.gather_rows(fwd.item_fused, std::make_shared<IndexVec>(batch.pos));
    Var n_rows = tape.gather_rows(fwd.item_fused, std::make_shared<IndexVec>(batch.neg));
    Var cf = bpr_loss(tape, u_rows, p_rows, n_rows);

    Var step_loss = cf;
    Var su, sv;
    if (use_ssl) {
      std::vector<int64_t> ssl_users =
          pad_distinct(batch.users, train.num_users, kSslBatchFloor, rng_);
      std::vector<int64_t> item_pool = batch.pos;
      item_pool.insert(item_pool.end(), batch.neg.begin(), batch.neg.end());
      std::vector<int64_t> ssl_items =
          pad_distinct(std::move(item_pool), train.num_items, kSslBatchFloor, rng_);

      auto user_local = std::make_shared<IndexVec>(ssl_users);
      auto user_global = std::make_shared<IndexVec>();
      for (int64_t u : ssl_users) user_global->push_back(entity_offset + u);
      auto item_idx = std::make_shared<IndexVec>(ssl_items);

      su = infonce(tape, fwd.user_enc.layers, fwd.knowledge_enc.layers, user_local, user_global,
                   config_.tau);
      sv = infonce(tape, fwd.item_enc.layers, fwd.knowledge_enc.layers, item_idx, item_idx,
                   config_.tau);
      step_loss = tape.add(cf, tape.scale(tape.add(su, sv), config_.lambda2));
    }

    double loss_value = tape.value(step_loss).item();
    if (!std::isfinite(loss_value)) {
      throw std::runtime_error("training diverged: non-finite interaction loss at epoch " +
                               std::to_string(epoch) + ", step " + std::to_string(step));
    }
    tape.backward(step_loss);
    std::vector<std::pair<int, const Tensor*>> grads;
    grads.reserve(flat.size());
    for (size_t i = 0; i < flat.size(); ++i) {
      grads.emplace_back(all_param_ids_[i], &tape.grad(flat[i]));
    }
    optimizer_.step(grads);

    cf_sum += tape.value(cf).item();
    if (use_ssl) {
      su_sum += tape.value(su).item();
      sv_sum += tape.value(sv).item();
    }
  }
  *ssl_u = su_sum;
  *ssl_v = sv_sum;
  return cf_sum;
}

double Trainer::run_kg_phase(int64_t epoch) {
  int64_t total = static_cast<int64_t>(data_.ckhg.triples.size());
  int64_t steps = (total + config_.kg_batch - 1) / config_.kg_batch;
  double kg_sum = 0;
  for (int64_t step = 0; step < steps; ++step) {
    KgBatch batch = sample_kg_batch(data_.ckhg, config_.kg_batch, rng_);

    Tape tape;
    std::vector<Var> flat = model_.bind_flat(tape);
    ParamVars pv = map_param_vars(model_.state(), flat);
    Var loss = model_.kg_loss(tape, pv, batch.heads, batch.rels, batch.tails, batch.corrupt);
    double loss_value = tape.value(loss).item();
    if (!std::isfinite(loss_value)) {
      throw std::runtime_error("training diverged: non-finite knowledge loss at epoch " +
                               std::to_string(epoch) + ", step " + std::to_string(step));
    }
    tape.backward(loss);

    // Knowledge steps update only the entity table and the relation
    // parameters that appear in the batch.
    std::set<int64_t> rels(batch.rels.begin(), batch.rels.end());
    std::vector<std::pair<int, const Tensor*>> grads;
    grads.emplace_back(entity_param_id_, &tape.grad(pv.entity_table));
    for (int64_t r : rels) {
      grads.emplace_back(rel_w_ids_[static_cast<size_t>(r)], &tape.grad(pv.rel_w[static_cast<size_t>(r)]));
      grads.emplace_back(rel_e_ids_[static_cast<size_t>(r)], &tape.grad(pv.rel_e[static_cast<size_t>(r)]));
    }
    optimizer_.step(grads);
    kg_sum += loss_value;
  }
  return kg_sum;
}

TrainResult Trainer::train() {
  GraphOperators clean_ops = build_operators(data_.snaps, config_.model_config());
  PlateauScheduler scheduler(config_.lr, static_cast<int>(config_.plateau_patience),
                             config_.plateau_factor, config_.lr_floor, /*maximize=*/true);
  TrainResult result;
  int64_t stale = 0;

  for (int64_t epoch = 1; epoch <= config_.max_epochs; ++epoch) {
    double lr_in_effect = optimizer_.lr();

    GraphOperators ops;
    const GraphOperators* epoch_ops = &clean_ops;
    if (config_.dropedge_rate > 0) {
      SnapshotSet dropped;
      uint64_t base = config_.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) * 3;
      dropped.user_view = drop_edge(data_.snaps.user_view, config_.dropedge_rate, base);
      dropped.item_view = drop_edge(data_.snaps.item_view, config_.dropedge_rate, base + 1);
      dropped.knowledge_view = drop_edge(data_.snaps.knowledge_view, config_.dropedge_rate, base + 2);
      ops = build_operators(dropped, config_.model_config());
      epoch_ops = &ops;
    }

    double ssl_u = 0, ssl_v = 0;
    double cf = run_cf_phase(*epoch_ops, epoch, &ssl_u, &ssl_v);
    double kg = config_.no_global ? 0.0 : run_kg_phase(epoch);
    double reg = param_l2_norm_sq(model_.state());
    double lambda2_eff = config_.no_ccl ? 0.0 : config_.lambda2;
    LossBreakdown breakdown = total_loss(cf, kg, ssl_u, ssl_v, reg, config_.lambda1, lambda2_eff);

    double val = validation_recall20(clean_ops);

    EpochLog log;
    log.epoch = epoch;
    log.cf = cf;
    log.kg = kg;
    log.ssl_u = ssl_u;
    log.ssl_v = ssl_v;
    log.total = breakdown.total;
    log.lr = lr_in_effect;
    log.val_recall20 = val;
    result.curve.push_back(log);
    result.epochs_run = epoch;

    if (best_epoch_ < 0 || val > best_metric_) {
      best_metric_ = val;
      best_epoch_ = epoch;
      best_state_ = model_.state();
      stale = 0;
    } else {
      ++stale;
    }
    optimizer_.set_lr(scheduler.observe(val));
    if (stale >= config_.early_stop_patience) break;
  }
  result.best_epoch = best_epoch_;
  result.best_val_recall20 = best_metric_;
  return result;
}

Checkpoint Trainer::make_checkpoint(bool best) const {
  Checkpoint ckpt;
  ckpt.config_text = config_.to_text();
  ckpt.num_users = model_.state().num_users;
  ckpt.num_items = model_.state().num_items;
  ckpt.num_nodes = model_.state().num_nodes;
  ckpt.num_relations = model_.state().num_relations;
  ckpt.state = best ? best_state_ : model_.state();
  for (size_t i = 0; i < optimizer_.param_count(); ++i) {
    const auto& slot = optimizer_.slot(static_cast<int>(i));
    ckpt.optimizer.push_back({slot.name, slot.m, slot.v, slot.steps});
  }
  ckpt.lr = optimizer_.lr();
  ckpt.weight_decay = optimizer_.weight_decay();
  ckpt.epoch = best ? best_epoch_ : static_cast<int64_t>(0);
  ckpt.best_metric = best_metric_;
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  auto dst = model_.state().named_params();
  auto src = ckpt.state.named_params();
  if (dst.size() != src.size()) {
    throw std::runtime_error("restore: parameter count mismatch");
  }
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].first != src[i].first || !dst[i].second->same_shape(*src[i].second)) {
      throw std::runtime_error("restore: parameter layout mismatch at '" + dst[i].first + "'");
    }
    *dst[i].second = *src[i].second;
  }
  if (ckpt.optimizer.size() == optimizer_.param_count()) {
    for (size_t i = 0; i < ckpt.optimizer.size(); ++i) {
      auto& slot = optimizer_.slot(static_cast<int>(i));
      if (slot.name != ckpt.optimizer[i].name) {
        throw std::runtime_error("restore: optimizer slot mismatch at '" + slot.name + "'");
      }
      slot.m = ckpt.optimizer[i].m;
      slot.v = ckpt.optimizer[i].v;
      slot.steps = ckpt.optimizer[i].steps;
    }
  }
  optimizer_.set_lr(ckpt.lr);
  best_state_ = ckpt.state;
  best_metric_ = ckpt.best_metric;
  best_epoch_ = ckpt.epoch;
}

}  // namespace hyperrec
