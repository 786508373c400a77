#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hyperrec/hypergraph.hpp"
#include "hyperrec/tape.hpp"

namespace hyperrec {

struct ModelConfig {
  int64_t dim = 64;
  int64_t layers = 2;
  double leaky_slope = 0.2;
  // Local convolution applies Theta = I - S as printed; false switches to the
  // plain smoothing operator S.
  bool laplacian_conv = true;
  // Share one set of Q/K/V/P/feed-forward weights across layers.
  bool shared_layer_params = false;
  // Ablations
  bool ablate_hypergraph = false;       // convolutions become clique-mean aggregation
  bool ablate_global = false;           // no knowledge encoder; items use the CF channel
  bool ablate_attention_fusion = false; // fixed 0.5/0.5 channel mix
};

struct LayerParams {
  Tensor q, k, v;          // d x d projections
  Tensor p;                // d x d convolution weight
  Tensor ff1_w, ff2_w;     // d x d
  Tensor ff1_b, ff2_b;     // d
};

// Every learnable array. Users, items and knowledge entities each have a
// local table; the entity table spans all collaborative-knowledge nodes
// (entities first, then users).
struct ModelState {
  ModelConfig config;
  int64_t num_users = 0;
  int64_t num_items = 0;
  int64_t num_nodes = 0;          // entity table rows = entities + users
  int64_t num_relations = 0;      // directed relations (canonical + inverses)

  Tensor user_table;
  Tensor item_table;
  Tensor entity_table;
  std::vector<LayerParams> user_layers;  // encoder over the user-node view
  std::vector<LayerParams> item_layers;  // encoder over the item-node view
  std::vector<Tensor> global_p;          // per-layer convolution weight, knowledge view
  std::vector<Tensor> rel_w;             // per-relation d x d projection
  std::vector<Tensor> rel_e;             // per-relation embedding
  Tensor fusion_w, fusion_b, fusion_q;

  static ModelState init(const ModelConfig& config, int64_t users, int64_t items, int64_t nodes,
                         int64_t relations, uint64_t seed);

  // Stable enumeration used by the optimizer and the checkpoint format.
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
};

// Static per-epoch structures the encoders run over (rebuilt after DropEdge).
struct GraphOperators {
  // Local views
  std::shared_ptr<const SparseMatrix> user_conv;  // Theta / S / clique mean
  std::shared_ptr<const SparseMatrix> item_conv;
  std::shared_ptr<const SparsePattern> user_att;
  std::shared_ptr<const SparsePattern> item_att;
  SpansPtr user_att_spans, item_att_spans;

  // Knowledge view
  Snapshot knowledge;
  std::shared_ptr<const SparseMatrix> knowledge_clique;  // only for the hypergraph ablation
  // Triples grouped by directed relation; scatter positions restore the
  // canonical (edge, tail, relation) triple order.
  std::vector<int64_t> relations_present;
  std::vector<IndexVecPtr> rel_heads, rel_tails;  // node ids per group
  ScatterGroupsPtr rel_scatter;
};

GraphOperators build_operators(const SnapshotSet& snaps, const ModelConfig& config);

// Leaves for every parameter, bound to one tape.
struct ParamVars {
  Var user_table, item_table, entity_table;
  struct LayerVars {
    Var q, k, v, p, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  std::vector<LayerVars> user_layers, item_layers;
  std::vector<Var> global_p;
  std::vector<Var> rel_w, rel_e;
  Var fusion_w, fusion_b, fusion_q;
};

struct EncoderOutput {
  std::vector<Var> layers;  // hidden states H^(0..L)
  Var final;                // H^(L) + residual input
};

struct ModelForward {
  ParamVars params;
  EncoderOutput user_enc;
  EncoderOutput item_enc;
  EncoderOutput knowledge_enc;  // empty vars when the global channel is ablated
  Var item_fused;               // items x d
  Var fusion_beta;              // [2]
  Var pi;                       // per-triple attention, canonical triple order
  bool has_global = false;
};

class Model {
 public:
  explicit Model(ModelState state) : state_(std::move(state)) {}

  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }

  ParamVars bind(Tape& tape) const;
  // Leaves in named_params() order; bind() is map_param_vars over this.
  std::vector<Var> bind_flat(Tape& tape) const;

  // Both local encoders, the knowledge encoder (unless ablated), and channel
  // fusion of the item embeddings.
  ModelForward forward(Tape& tape, const GraphOperators& ops) const;
  ModelForward forward(Tape& tape, const ParamVars& params, const GraphOperators& ops) const;

  // Knowledge ranking loss over a batch of (head, rel, tail, corrupt-tail).
  // Only touches the entity table and relation parameters.
  Var kg_loss(Tape& tape, const ParamVars& params, const std::vector<int64_t>& heads,
              const std::vector<int64_t>& rels, const std::vector<int64_t>& tails,
              const std::vector<int64_t>& corrupt_tails) const;

  // All-pairs prediction scores, users x items.
  Tensor score_all(const GraphOperators& ops) const;

 private:
  ModelState state_;
};

// --- encoder building blocks (exposed for direct verification) ---

struct AttentionContext {
  std::shared_ptr<const SparsePattern> pattern;  // square, self loops included
  SpansPtr spans;                                // row offsets of the pattern
};

// Scaled dot-product attention over hypergraph neighborhoods followed by the
// residual layer norm.
Var self_attention(Tape& t, Var h, const AttentionContext& ctx, Var q, Var k, Var v);
// LayerNorm(h + FFN(h)) with a two-layer feed-forward and leaky-relu between.
Var transition(Tape& t, Var h, Var ff1_w, Var ff1_b, Var ff2_w, Var ff2_b, double slope);
// sigma(op . h . p)
Var hgconv(Tape& t, Var h, std::shared_ptr<const SparseMatrix> op, Var p, double slope);

// Full local encoder: per layer self-attention -> transition -> convolution,
// then an identity residual of the input features.
EncoderOutput hgtn_forward(Tape& t, Var features, const AttentionContext& att,
                           std::shared_ptr<const SparseMatrix> conv_op,
                           const std::vector<ParamVars::LayerVars>& layers, int64_t num_layers,
                           bool shared, double slope, bool plain_mean_conv);

// Unnormalized relation-aware attention scores (W_r e_t)^T tanh(W_r e_h + e_r)
// for one relation's triples.
Var relation_attention_scores(Tape& t, Var entity_table, Var w_r, Var e_r, IndexVecPtr heads,
                              IndexVecPtr tails);

// TransR energies ||W_r e_h + e_r - W_r e_t||^2 for one relation's triples.
Var transr_energies(Tape& t, Var entity_table, Var w_r, Var e_r, IndexVecPtr heads,
                    IndexVecPtr tails);

struct FusionResult {
  Var fused;
  Var beta;  // [2]
};
FusionResult channel_fusion(Tape& t, Var m_cf, Var m_ckg, Var w, Var b, Var q, bool fixed_half);

// Cross-view contrastive loss summed over layers; rows are matched by
// position between the gathered local and global views.
Var infonce(Tape& t, const std::vector<Var>& local_layers, const std::vector<Var>& global_layers,
            IndexVecPtr local_rows, IndexVecPtr global_rows, double tau);

// Pairwise ranking loss sum(-ln sigmoid(pos - neg)).
Var bpr_loss(Tape& t, Var user_rows, Var pos_rows, Var neg_rows);

struct LossBreakdown {
  double cf = 0, kg = 0, ssl_user = 0, ssl_item = 0, reg = 0, total = 0;
};
// total = cf + kg + lambda2 (ssl_user + ssl_item) + lambda1 reg; throws on a
// non-finite part, naming the term.
LossBreakdown total_loss(double cf, double kg, double ssl_user, double ssl_item, double reg,
                         double lambda1, double lambda2);

// Frobenius norm squared over all parameters (reported analytically; the
// optimizer realizes the same term as coupled weight decay).
double param_l2_norm_sq(const ModelState& state);

// Maps a flat var list in named_params() order onto the ParamVars layout.
ParamVars map_param_vars(const ModelState& state, const std::vector<Var>& flat);

}  // namespace hyperrec
