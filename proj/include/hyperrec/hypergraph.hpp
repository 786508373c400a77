#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "hyperrec/dataset.hpp"
#include "hyperrec/sparse.hpp"
#include "hyperrec/tape.hpp"

namespace hyperrec {

// One hypergraph view of the collaborative knowledge hypergraph. The local
// views cover the interaction matrix (user nodes with one hyperedge per item,
// and item nodes with one hyperedge per user); the knowledge view covers all
// nodes with one hyperedge per head entity grouping the tails of its triples.
struct Snapshot {
  enum class Kind { kUserNodes, kItemNodes, kEntityNodes };

  Kind kind = Kind::kUserNodes;
  int64_t num_nodes = 0;
  int64_t num_edges = 0;
  std::shared_ptr<const SparseMatrix> incidence;  // nodes x edges, binary
  std::vector<double> edge_weights;               // diagonal W, defaults to 1
  std::vector<int64_t> edge_key;                  // edge -> node id it is keyed by

  // Knowledge view only: triples sorted by (edge, tail node, relation) so the
  // per-edge attention softmax and the collapse onto incidence entries both
  // run over contiguous spans.
  std::vector<int64_t> tri_edge;
  std::vector<int64_t> tri_tail;
  std::vector<int64_t> tri_rel;
  SpansPtr edge_triple_offsets;       // num_edges + 1
  SpansPtr incidence_triple_offsets;  // nnz(incidence) + 1
  // rows = edges, cols = nodes; canonical order matches incidence_triple_offsets
  std::shared_ptr<const SparsePattern> edge_node_pattern;

  int64_t triple_count() const { return static_cast<int64_t>(tri_edge.size()); }
};

struct SnapshotSet {
  Snapshot user_view;       // user nodes, item hyperedges
  Snapshot item_view;       // item nodes, user hyperedges
  Snapshot knowledge_view;  // all nodes, head-entity hyperedges
};

// Decomposes the unified store into the three snapshots. Interaction triples
// (relation 0 and its inverse) define the local views.
SnapshotSet build_snapshots(const TripleStore& ckhg);

// Theta = I - Dv^{-1/2} A W De^{-1} A^T Dv^{-1/2}; rows of isolated nodes are
// identity rows (zero degrees pseudo-inverted to zero).
SparseMatrix normalized_operator(const Snapshot& snapshot);
// The smoothing part Dv^{-1/2} A W De^{-1} A^T Dv^{-1/2} alone.
SparseMatrix smoothing_operator(const Snapshot& snapshot);

// Row-normalized adjacency of the clique expansion (self loops included);
// the plain-graph aggregation used by the no-hypergraph ablation.
SparseMatrix clique_mean_operator(const Snapshot& snapshot);

// Square pattern of nodes sharing at least one hyperedge, plus self loops.
// Neighborhood support for the local encoder's self-attention.
std::shared_ptr<const SparsePattern> attention_pattern(const Snapshot& snapshot);

// Zeroes each incidence entry independently with probability p (deterministic
// per seed). Dropped snapshots may contain empty hyperedges.
SparseMatrix drop_edge(const SparseMatrix& a, double p, uint64_t seed);
Snapshot drop_edge(const Snapshot& snapshot, double p, uint64_t seed);

}  // namespace hyperrec
