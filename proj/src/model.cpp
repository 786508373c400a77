#include "hyperrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

namespace hyperrec {

namespace {

void xavier_fill(Tensor& t, std::mt19937_64& rng) {
  double fan_in, fan_out;
  if (t.rank() == 2) {
    fan_in = static_cast<double>(t.dim(0));
    fan_out = static_cast<double>(t.dim(1));
  } else {
    fan_in = fan_out = static_cast<double>(t.numel());
  }
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> unif(-limit, limit);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = unif(rng);
}

LayerParams make_layer(int64_t d, std::mt19937_64& rng) {
  LayerParams lp;
  lp.q = Tensor({d, d});
  lp.k = Tensor({d, d});
  lp.v = Tensor({d, d});
  lp.p = Tensor({d, d});
  lp.ff1_w = Tensor({d, d});
  lp.ff1_b = Tensor({d});
  lp.ff2_w = Tensor({d, d});
  lp.ff2_b = Tensor({d});
  xavier_fill(lp.q, rng);
  xavier_fill(lp.k, rng);
  xavier_fill(lp.v, rng);
  xavier_fill(lp.p, rng);
  xavier_fill(lp.ff1_w, rng);
  xavier_fill(lp.ff2_w, rng);
  return lp;
}

SpansPtr row_spans(const SparsePattern& p) {
  return std::make_shared<IndexVec>(p.row_ptr);
}

}  // namespace

ModelState ModelState::init(const ModelConfig& config, int64_t users, int64_t items,
                            int64_t nodes, int64_t relations, uint64_t seed) {
  if (config.dim <= 0) throw std::invalid_argument("model: embedding dimension must be positive");
  if (config.layers < 1) throw std::invalid_argument("model: layer count must be >= 1");
  ModelState s;
  s.config = config;
  s.num_users = users;
  s.num_items = items;
  s.num_nodes = nodes;
  s.num_relations = relations;
  int64_t d = config.dim;
  std::mt19937_64 rng(seed);

  s.user_table = Tensor({users, d});
  s.item_table = Tensor({items, d});
  s.entity_table = Tensor({nodes, d});
  xavier_fill(s.user_table, rng);
  xavier_fill(s.item_table, rng);
  xavier_fill(s.entity_table, rng);

  int64_t stacks = config.shared_layer_params ? 1 : config.layers;
  for (int64_t l = 0; l < stacks; ++l) s.user_layers.push_back(make_layer(d, rng));
  for (int64_t l = 0; l < stacks; ++l) s.item_layers.push_back(make_layer(d, rng));
  for (int64_t l = 0; l < stacks; ++l) {
    Tensor p({d, d});
    xavier_fill(p, rng);
    s.global_p.push_back(std::move(p));
  }
  for (int64_t r = 0; r < relations; ++r) {
    Tensor w({d, d});
    xavier_fill(w, rng);
    s.rel_w.push_back(std::move(w));
    Tensor e({d});
    xavier_fill(e, rng);
    s.rel_e.push_back(std::move(e));
  }
  s.fusion_w = Tensor({d, d});
  xavier_fill(s.fusion_w, rng);
  s.fusion_b = Tensor({d});
  s.fusion_q = Tensor({d});
  xavier_fill(s.fusion_q, rng);
  return s;
}

std::vector<std::pair<std::string, Tensor*>> ModelState::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("user_table", &user_table);
  out.emplace_back("item_table", &item_table);
  out.emplace_back("entity_table", &entity_table);
  auto add_stack = [&](const std::string& prefix, std::vector<LayerParams>& stack) {
    for (size_t l = 0; l < stack.size(); ++l) {
      std::string base = prefix + std::to_string(l) + ".";
      out.emplace_back(base + "q", &stack[l].q);
      out.emplace_back(base + "k", &stack[l].k);
      out.emplace_back(base + "v", &stack[l].v);
      out.emplace_back(base + "p", &stack[l].p);
      out.emplace_back(base + "ff1_w", &stack[l].ff1_w);
      out.emplace_back(base + "ff1_b", &stack[l].ff1_b);
      out.emplace_back(base + "ff2_w", &stack[l].ff2_w);
      out.emplace_back(base + "ff2_b", &stack[l].ff2_b);
    }
  };
  add_stack("user_layer", user_layers);
  add_stack("item_layer", item_layers);
  for (size_t l = 0; l < global_p.size(); ++l) {
    out.emplace_back("global_p" + std::to_string(l), &global_p[l]);
  }
  for (size_t r = 0; r < rel_w.size(); ++r) {
    out.emplace_back("rel_w" + std::to_string(r), &rel_w[r]);
    out.emplace_back("rel_e" + std::to_string(r), &rel_e[r]);
  }
  out.emplace_back("fusion_w", &fusion_w);
  out.emplace_back("fusion_b", &fusion_b);
  out.emplace_back("fusion_q", &fusion_q);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelState::named_params() const {
  auto mut = const_cast<ModelState*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

GraphOperators build_operators(const SnapshotSet& snaps, const ModelConfig& config) {
  GraphOperators ops;
  auto conv_for = [&](const Snapshot& s) {
    if (config.ablate_hypergraph) return std::make_shared<SparseMatrix>(clique_mean_operator(s));
    if (config.laplacian_conv) return std::make_shared<SparseMatrix>(normalized_operator(s));
    return std::make_shared<SparseMatrix>(smoothing_operator(s));
  };
  ops.user_conv = conv_for(snaps.user_view);
  ops.item_conv = conv_for(snaps.item_view);
  ops.user_att = attention_pattern(snaps.user_view);
  ops.item_att = attention_pattern(snaps.item_view);
  ops.user_att_spans = row_spans(*ops.user_att);
  ops.item_att_spans = row_spans(*ops.item_att);

  ops.knowledge = snaps.knowledge_view;
  if (config.ablate_hypergraph) {
    ops.knowledge_clique = std::make_shared<SparseMatrix>(clique_mean_operator(snaps.knowledge_view));
  }

  // Group the knowledge triples by directed relation.
  std::map<int64_t, std::vector<int64_t>> by_rel;
  for (int64_t k = 0; k < ops.knowledge.triple_count(); ++k) {
    by_rel[ops.knowledge.tri_rel[static_cast<size_t>(k)]].push_back(k);
  }
  auto scatter = std::make_shared<ScatterGroups>();
  for (const auto& [rel, idx] : by_rel) {
    ops.relations_present.push_back(rel);
    auto heads = std::make_shared<IndexVec>();
    auto tails = std::make_shared<IndexVec>();
    heads->reserve(idx.size());
    tails->reserve(idx.size());
    for (int64_t k : idx) {
      heads->push_back(
          ops.knowledge.edge_key[static_cast<size_t>(ops.knowledge.tri_edge[static_cast<size_t>(k)])]);
      tails->push_back(ops.knowledge.tri_tail[static_cast<size_t>(k)]);
    }
    ops.rel_heads.push_back(std::move(heads));
    ops.rel_tails.push_back(std::move(tails));
    scatter->positions.push_back(idx);
  }
  ops.rel_scatter = scatter;
  return ops;
}

std::vector<Var> Model::bind_flat(Tape& tape) const {
  std::vector<Var> flat;
  for (const auto& [name, t] : state_.named_params()) flat.push_back(tape.leaf(*t));
  return flat;
}

ParamVars Model::bind(Tape& tape) const {
  return map_param_vars(state_, bind_flat(tape));
}

Var self_attention(Tape& t, Var h, const AttentionContext& ctx, Var q, Var k, Var v) {
  int64_t d = t.value(h).cols();
  if (d == 0) throw std::invalid_argument("self_attention: embedding dimension is 0");
  Var qh = t.matmul(h, t.transpose(q));
  Var kh = t.matmul(h, t.transpose(k));
  Var vh = t.matmul(h, t.transpose(v));
  Var scores = t.scale(t.pair_dot(ctx.pattern, qh, kh), 1.0 / std::sqrt(static_cast<double>(d)));
  Var alpha = t.segment_softmax(scores, ctx.spans);
  Var att = t.spmm(ctx.pattern, alpha, vh);
  return t.layer_norm_rows(t.add(h, att));
}

Var transition(Tape& t, Var h, Var ff1_w, Var ff1_b, Var ff2_w, Var ff2_b, double slope) {
  Var a = t.leaky_relu(t.add_rowvec(t.matmul(h, t.transpose(ff1_w)), ff1_b), slope);
  Var out = t.add_rowvec(t.matmul(a, t.transpose(ff2_w)), ff2_b);
  return t.layer_norm_rows(t.add(h, out));
}

Var hgconv(Tape& t, Var h, std::shared_ptr<const SparseMatrix> op, Var p, double slope) {
  return t.leaky_relu(t.matmul(t.spmm_const(std::move(op), h), p), slope);
}

EncoderOutput hgtn_forward(Tape& t, Var features, const AttentionContext& att,
                           std::shared_ptr<const SparseMatrix> conv_op,
                           const std::vector<ParamVars::LayerVars>& layers, int64_t num_layers,
                           bool shared, double slope, bool plain_mean_conv) {
  if (num_layers < 1) throw std::invalid_argument("hgtn_forward: layer count must be >= 1");
  EncoderOutput out;
  Var h = features;
  out.layers.push_back(h);
  for (int64_t l = 0; l < num_layers; ++l) {
    const auto& lv = layers.at(static_cast<size_t>(shared ? 0 : l));
    Var h1 = self_attention(t, h, att, lv.q, lv.k, lv.v);
    Var h2 = transition(t, h1, lv.ff1_w, lv.ff1_b, lv.ff2_w, lv.ff2_b, slope);
    h = plain_mean_conv ? t.spmm_const(conv_op, h2) : hgconv(t, h2, conv_op, lv.p, slope);
    out.layers.push_back(h);
  }
  out.final = t.add(h, features);
  return out;
}

Var relation_attention_scores(Tape& t, Var entity_table, Var w_r, Var e_r, IndexVecPtr heads,
                              IndexVecPtr tails) {
  Var wt = t.transpose(w_r);
  Var proj_t = t.matmul(t.gather_rows(entity_table, std::move(tails)), wt);
  Var proj_h = t.add_rowvec(t.matmul(t.gather_rows(entity_table, std::move(heads)), wt), e_r);
  return t.sum_rows(t.mul(proj_t, t.tanh(proj_h)));
}

Var transr_energies(Tape& t, Var entity_table, Var w_r, Var e_r, IndexVecPtr heads,
                    IndexVecPtr tails) {
  Var wt = t.transpose(w_r);
  Var proj_h = t.add_rowvec(t.matmul(t.gather_rows(entity_table, std::move(heads)), wt), e_r);
  Var proj_t = t.matmul(t.gather_rows(entity_table, std::move(tails)), wt);
  Var diff = t.sub(proj_h, proj_t);
  return t.sum_rows(t.mul(diff, diff));
}

ModelForward Model::forward(Tape& tape, const GraphOperators& ops) const {
  return forward(tape, bind(tape), ops);
}

ModelForward Model::forward(Tape& tape, const ParamVars& params, const GraphOperators& ops) const {
  const ModelConfig& cfg = state_.config;
  ModelForward fwd;
  fwd.params = params;
  const ParamVars& pv = fwd.params;

  AttentionContext uctx{ops.user_att, ops.user_att_spans};
  AttentionContext ictx{ops.item_att, ops.item_att_spans};
  fwd.user_enc = hgtn_forward(tape, pv.user_table, uctx, ops.user_conv, pv.user_layers,
                              cfg.layers, cfg.shared_layer_params, cfg.leaky_slope,
                              cfg.ablate_hypergraph);
  fwd.item_enc = hgtn_forward(tape, pv.item_table, ictx, ops.item_conv, pv.item_layers,
                              cfg.layers, cfg.shared_layer_params, cfg.leaky_slope,
                              cfg.ablate_hypergraph);

  if (cfg.ablate_global) {
    fwd.has_global = false;
    fwd.item_fused = fwd.item_enc.final;
    fwd.fusion_beta = tape.constant(Tensor({2}, {1.0, 0.0}));
    return fwd;
  }

  // Relation-aware attention over every triple, built from the current
  // embeddings each pass so gradients flow through the scores.
  const Snapshot& kv = ops.knowledge;
  std::vector<Var> parts;
  parts.reserve(ops.relations_present.size());
  for (size_t g = 0; g < ops.relations_present.size(); ++g) {
    int64_t rel = ops.relations_present[g];
    if (rel < 0 || rel >= state_.num_relations) {
      throw std::invalid_argument("forward: unknown relation id " + std::to_string(rel));
    }
    parts.push_back(relation_attention_scores(tape, pv.entity_table,
                                              pv.rel_w[static_cast<size_t>(rel)],
                                              pv.rel_e[static_cast<size_t>(rel)],
                                              ops.rel_heads[g], ops.rel_tails[g]));
  }
  Var pi_raw = tape.scatter_groups(parts, ops.rel_scatter, kv.triple_count());
  fwd.pi = tape.segment_softmax(pi_raw, kv.edge_triple_offsets);
  Var inc_vals = tape.segment_sum(fwd.pi, kv.incidence_triple_offsets);

  Var h = pv.entity_table;
  fwd.knowledge_enc.layers.push_back(h);
  if (cfg.ablate_hypergraph) {
    for (int64_t l = 0; l < cfg.layers; ++l) {
      h = tape.spmm_const(ops.knowledge_clique, h);
      fwd.knowledge_enc.layers.push_back(h);
    }
  } else {
    Var dv_r = tape.rsqrt_guard(tape.sp_col_sums(kv.edge_node_pattern, inc_vals));
    Var de_r = tape.recip_guard(tape.sp_row_sums(kv.edge_node_pattern, inc_vals));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      Var t1 = tape.scale_rows(h, dv_r);
      Var t2 = tape.spmm(kv.edge_node_pattern, inc_vals, t1);
      Var t3 = tape.scale_rows(t2, de_r);
      Var t4 = tape.spmm_t(kv.edge_node_pattern, inc_vals, t3);
      Var t5 = tape.scale_rows(t4, dv_r);
      int64_t pi_l = cfg.shared_layer_params ? 0 : l;
      h = tape.leaky_relu(tape.matmul(t5, pv.global_p[static_cast<size_t>(pi_l)]),
                          cfg.leaky_slope);
      fwd.knowledge_enc.layers.push_back(h);
    }
  }
  fwd.knowledge_enc.final = tape.add(h, pv.entity_table);
  fwd.has_global = true;

  auto item_rows = std::make_shared<IndexVec>();
  for (int64_t i = 0; i < state_.num_items; ++i) item_rows->push_back(i);
  Var item_ckg = tape.gather_rows(fwd.knowledge_enc.final, item_rows);
  FusionResult fr = channel_fusion(tape, fwd.item_enc.final, item_ckg, pv.fusion_w, pv.fusion_b,
                                   pv.fusion_q, cfg.ablate_attention_fusion);
  fwd.item_fused = fr.fused;
  fwd.fusion_beta = fr.beta;
  return fwd;
}

FusionResult channel_fusion(Tape& t, Var m_cf, Var m_ckg, Var w, Var b, Var q, bool fixed_half) {
  const Tensor &a = t.value(m_cf), &c = t.value(m_ckg);
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw std::invalid_argument("channel_fusion: row mismatch " + a.shape_string() + " vs " +
                                c.shape_string());
  }
  if (fixed_half) {
    return {t.scale(t.add(m_cf, m_ckg), 0.5), t.constant(Tensor({2}, {0.5, 0.5}))};
  }
  int64_t d = a.cols();
  Var q_col = t.reshape(q, {d, 1});
  auto channel_weight = [&](Var m) {
    Var scores = t.matmul(t.tanh(t.add_rowvec(t.matmul(m, t.transpose(w)), b)), q_col);
    return t.reduce_mean(scores);
  };
  Var w_cf = channel_weight(m_cf);
  Var w_ckg = channel_weight(m_ckg);
  Var beta = t.softmax_rows(t.concat0({t.reshape(w_cf, {1}), t.reshape(w_ckg, {1})}));
  Var fused = t.add(t.scale_by(m_cf, t.element(beta, 0)), t.scale_by(m_ckg, t.element(beta, 1)));
  return {fused, beta};
}

Var infonce(Tape& t, const std::vector<Var>& local_layers, const std::vector<Var>& global_layers,
            IndexVecPtr local_rows, IndexVecPtr global_rows, double tau) {
  if (local_layers.size() != global_layers.size()) {
    throw std::invalid_argument("infonce: layer counts differ (" +
                                std::to_string(local_layers.size()) + " vs " +
                                std::to_string(global_layers.size()) + ")");
  }
  if (local_rows->size() != global_rows->size()) {
    throw std::invalid_argument("infonce: index sets differ in size");
  }
  if (tau <= 0) throw std::invalid_argument("infonce: temperature must be positive");
  Var total;
  for (size_t l = 0; l < local_layers.size(); ++l) {
    Var z = t.normalize_rows(t.gather_rows(local_layers[l], local_rows));
    Var g = t.normalize_rows(t.gather_rows(global_layers[l], global_rows));
    Var sims = t.scale(t.matmul(z, t.transpose(g)), 1.0 / tau);
    Var term = t.reduce_sum(t.sub(t.logsumexp_rows(sims), t.diag_part(sims)));
    total = l == 0 ? term : t.add(total, term);
  }
  return total;
}

Var bpr_loss(Tape& t, Var user_rows, Var pos_rows, Var neg_rows) {
  Var pos = t.sum_rows(t.mul(user_rows, pos_rows));
  Var neg = t.sum_rows(t.mul(user_rows, neg_rows));
  return t.reduce_sum(t.softplus(t.sub(neg, pos)));
}

Var Model::kg_loss(Tape& tape, const ParamVars& params, const std::vector<int64_t>& heads,
                   const std::vector<int64_t>& rels, const std::vector<int64_t>& tails,
                   const std::vector<int64_t>& corrupt_tails) const {
  if (heads.size() != rels.size() || heads.size() != tails.size() ||
      heads.size() != corrupt_tails.size() || heads.empty()) {
    throw std::invalid_argument("kg_loss: batch arrays must be non-empty and equal-sized");
  }
  std::map<int64_t, std::vector<size_t>> by_rel;
  for (size_t k = 0; k < rels.size(); ++k) {
    if (rels[k] < 0 || rels[k] >= state_.num_relations) {
      throw std::invalid_argument("kg_loss: unknown relation id " + std::to_string(rels[k]));
    }
    by_rel[rels[k]].push_back(k);
  }
  Var total;
  bool first = true;
  for (const auto& [rel, idx] : by_rel) {
    auto h = std::make_shared<IndexVec>();
    auto tp = std::make_shared<IndexVec>();
    auto tn = std::make_shared<IndexVec>();
    for (size_t k : idx) {
      h->push_back(heads[k]);
      tp->push_back(tails[k]);
      tn->push_back(corrupt_tails[k]);
    }
    Var w = params.rel_w[static_cast<size_t>(rel)];
    Var e = params.rel_e[static_cast<size_t>(rel)];
    Var d_pos = transr_energies(tape, params.entity_table, w, e, h, tp);
    Var d_neg = transr_energies(tape, params.entity_table, w, e, h, tn);
    Var part = tape.reduce_sum(tape.softplus(tape.sub(d_pos, d_neg)));
    total = first ? part : tape.add(total, part);
    first = false;
  }
  return total;
}

Tensor Model::score_all(const GraphOperators& ops) const {
  Tape tape;
  ModelForward fwd = forward(tape, ops);
  Var scores = tape.matmul(fwd.user_enc.final, tape.transpose(fwd.item_fused));
  return tape.value(scores);
}

LossBreakdown total_loss(double cf, double kg, double ssl_user, double ssl_item, double reg,
                         double lambda1, double lambda2) {
  auto check = [](double v, const char* term) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("total_loss: non-finite ") + term + " term");
    }
  };
  check(cf, "cf");
  check(kg, "kg");
  check(ssl_user, "ssl_user");
  check(ssl_item, "ssl_item");
  check(reg, "reg");
  LossBreakdown b;
  b.cf = cf;
  b.kg = kg;
  b.ssl_user = ssl_user;
  b.ssl_item = ssl_item;
  b.reg = reg;
  b.total = cf + kg + lambda2 * (ssl_user + ssl_item) + lambda1 * reg;
  return b;
}

double param_l2_norm_sq(const ModelState& state) {
  double total = 0;
  for (const auto& [name, t] : state.named_params()) {
    for (int64_t i = 0; i < t->numel(); ++i) total += t->at(i) * t->at(i);
  }
  return total;
}

ParamVars map_param_vars(const ModelState& state, const std::vector<Var>& flat) {
  size_t expected = state.named_params().size();
  if (flat.size() != expected) {
    throw std::invalid_argument("map_param_vars: got " + std::to_string(flat.size()) +
                                " vars, expected " + std::to_string(expected));
  }
  ParamVars pv;
  size_t k = 0;
  pv.user_table = flat[k++];
  pv.item_table = flat[k++];
  pv.entity_table = flat[k++];
  auto take_stack = [&](size_t count) {
    std::vector<ParamVars::LayerVars> out;
    for (size_t l = 0; l < count; ++l) {
      ParamVars::LayerVars lv;
      lv.q = flat[k++];
      lv.k = flat[k++];
      lv.v = flat[k++];
      lv.p = flat[k++];
      lv.ff1_w = flat[k++];
      lv.ff1_b = flat[k++];
      lv.ff2_w = flat[k++];
      lv.ff2_b = flat[k++];
      out.push_back(lv);
    }
    return out;
  };
  pv.user_layers = take_stack(state.user_layers.size());
  pv.item_layers = take_stack(state.item_layers.size());
  for (size_t l = 0; l < state.global_p.size(); ++l) pv.global_p.push_back(flat[k++]);
  for (size_t r = 0; r < state.rel_w.size(); ++r) {
    pv.rel_w.push_back(flat[k++]);
    pv.rel_e.push_back(flat[k++]);
  }
  pv.fusion_w = flat[k++];
  pv.fusion_b = flat[k++];
  pv.fusion_q = flat[k++];
  return pv;
}

}  // namespace hyperrec
