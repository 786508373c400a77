#include "hyperrec/hypergraph.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace hyperrec {

namespace {

std::shared_ptr<const SparseMatrix> incidence_from_pairs(
    int64_t nodes, int64_t edges, std::vector<std::pair<int64_t, int64_t>> node_edge) {
  std::sort(node_edge.begin(), node_edge.end());
  node_edge.erase(std::unique(node_edge.begin(), node_edge.end()), node_edge.end());
  std::vector<SparseMatrix::Entry> entries;
  entries.reserve(node_edge.size());
  for (const auto& [v, e] : node_edge) entries.push_back({v, e, 1.0});
  return std::make_shared<SparseMatrix>(nodes, edges, std::move(entries));
}

Snapshot make_local_view(Snapshot::Kind kind, int64_t num_nodes, int64_t key_space,
                         const std::vector<std::pair<int64_t, int64_t>>& node_key_pairs) {
  // One hyperedge per key that actually connects something.
  std::vector<char> has(static_cast<size_t>(key_space), 0);
  for (const auto& [node, key] : node_key_pairs) has[static_cast<size_t>(key)] = 1;
  std::vector<int64_t> edge_of_key(static_cast<size_t>(key_space), -1);
  Snapshot s;
  s.kind = kind;
  s.num_nodes = num_nodes;
  for (int64_t k = 0; k < key_space; ++k) {
    if (has[static_cast<size_t>(k)]) {
      edge_of_key[static_cast<size_t>(k)] = s.num_edges++;
      s.edge_key.push_back(k);
    }
  }
  std::vector<std::pair<int64_t, int64_t>> node_edge;
  node_edge.reserve(node_key_pairs.size());
  for (const auto& [node, key] : node_key_pairs) {
    node_edge.emplace_back(node, edge_of_key[static_cast<size_t>(key)]);
  }
  s.incidence = incidence_from_pairs(s.num_nodes, s.num_edges, std::move(node_edge));
  s.edge_weights.assign(static_cast<size_t>(s.num_edges), 1.0);
  return s;
}

struct EntityTriple {
  int64_t edge;
  int64_t tail;
  int64_t rel;
  auto operator<=>(const EntityTriple&) const = default;
};

void finish_entity_view(Snapshot& s, std::vector<EntityTriple> tris) {
  std::sort(tris.begin(), tris.end());
  tris.erase(std::unique(tris.begin(), tris.end()), tris.end());

  auto edge_offsets = std::make_shared<IndexVec>();
  auto inc_offsets = std::make_shared<IndexVec>();
  edge_offsets->assign(static_cast<size_t>(s.num_edges + 1), 0);

  std::vector<std::pair<int64_t, int64_t>> inc_pairs;  // (edge, tail), unique
  std::vector<std::pair<int64_t, int64_t>> node_edge;  // (tail, edge) for the incidence matrix
  for (size_t k = 0; k < tris.size(); ++k) {
    const EntityTriple& t = tris[k];
    s.tri_edge.push_back(t.edge);
    s.tri_tail.push_back(t.tail);
    s.tri_rel.push_back(t.rel);
    ++(*edge_offsets)[static_cast<size_t>(t.edge + 1)];
    if (inc_pairs.empty() || inc_pairs.back() != std::make_pair(t.edge, t.tail)) {
      inc_pairs.emplace_back(t.edge, t.tail);
      node_edge.emplace_back(t.tail, t.edge);
      inc_offsets->push_back(static_cast<int64_t>(k));
    }
  }
  inc_offsets->push_back(static_cast<int64_t>(tris.size()));
  for (int64_t e = 0; e < s.num_edges; ++e) {
    (*edge_offsets)[static_cast<size_t>(e + 1)] += (*edge_offsets)[static_cast<size_t>(e)];
  }

  s.edge_triple_offsets = edge_offsets;
  s.incidence_triple_offsets = inc_offsets;
  s.incidence = incidence_from_pairs(s.num_nodes, s.num_edges, std::move(node_edge));
  s.edge_weights.assign(static_cast<size_t>(s.num_edges), 1.0);
  s.edge_node_pattern = SparsePattern::build(s.num_edges, s.num_nodes, std::move(inc_pairs));
}

}  // namespace

SnapshotSet build_snapshots(const TripleStore& ckhg) {
  SnapshotSet out;

  // Interaction pairs from the interact triples (canonical relation 0).
  std::vector<std::pair<int64_t, int64_t>> user_item;
  for (const auto& t : ckhg.triples) {
    if (t.rel == 0) {
      user_item.emplace_back(t.head - ckhg.num_entities, t.tail);
    }
  }

  std::vector<std::pair<int64_t, int64_t>> user_node_item_key = user_item;
  out.user_view = make_local_view(Snapshot::Kind::kUserNodes, ckhg.num_users, ckhg.num_items,
                                  user_node_item_key);
  std::vector<std::pair<int64_t, int64_t>> item_node_user_key;
  item_node_user_key.reserve(user_item.size());
  for (const auto& [u, i] : user_item) item_node_user_key.emplace_back(i, u);
  out.item_view = make_local_view(Snapshot::Kind::kItemNodes, ckhg.num_items, ckhg.num_users,
                                  item_node_user_key);

  // Knowledge view: one hyperedge per head entity with outgoing triples.
  Snapshot& kv = out.knowledge_view;
  kv.kind = Snapshot::Kind::kEntityNodes;
  kv.num_nodes = ckhg.total_nodes();
  std::vector<char> is_head(static_cast<size_t>(kv.num_nodes), 0);
  for (const auto& t : ckhg.triples) is_head[static_cast<size_t>(t.head)] = 1;
  std::vector<int64_t> edge_of_head(static_cast<size_t>(kv.num_nodes), -1);
  for (int64_t n = 0; n < kv.num_nodes; ++n) {
    if (is_head[static_cast<size_t>(n)]) {
      edge_of_head[static_cast<size_t>(n)] = kv.num_edges++;
      kv.edge_key.push_back(n);
    }
  }
  std::vector<EntityTriple> tris;
  tris.reserve(ckhg.triples.size());
  for (const auto& t : ckhg.triples) {
    tris.push_back({edge_of_head[static_cast<size_t>(t.head)], t.tail, t.rel});
  }
  finish_entity_view(kv, std::move(tris));
  return out;
}

namespace {

// Shared skeleton for the normalized operators: calls emit(v, u, s_vu) for the
// smoothing term of every touched (v, u).
template <typename Emit>
void accumulate_smoothing(const Snapshot& snap, Emit&& emit) {
  const SparseMatrix& a = *snap.incidence;
  int64_t nv = a.rows(), ne = a.cols();
  std::vector<double> dv(static_cast<size_t>(nv), 0.0);
  std::vector<double> de(static_cast<size_t>(ne), 0.0);
  for (int64_t v = 0; v < nv; ++v) {
    for (int64_t p = a.row_ptr()[static_cast<size_t>(v)]; p < a.row_ptr()[static_cast<size_t>(v + 1)]; ++p) {
      int64_t e = a.col_index()[static_cast<size_t>(p)];
      dv[static_cast<size_t>(v)] += snap.edge_weights[static_cast<size_t>(e)];
      de[static_cast<size_t>(e)] += 1.0;
    }
  }
  auto rsqrt = [](double x) { return x <= kGuard ? 0.0 : 1.0 / std::sqrt(x); };

  std::vector<double> acc(static_cast<size_t>(nv), 0.0);
  std::vector<int64_t> touched;
  for (int64_t v = 0; v < nv; ++v) {
    touched.clear();
    for (int64_t p = a.row_ptr()[static_cast<size_t>(v)]; p < a.row_ptr()[static_cast<size_t>(v + 1)]; ++p) {
      int64_t e = a.col_index()[static_cast<size_t>(p)];
      if (de[static_cast<size_t>(e)] <= kGuard) continue;
      double coeff = snap.edge_weights[static_cast<size_t>(e)] / de[static_cast<size_t>(e)];
      if (coeff == 0.0) continue;
      for (int64_t q = a.csc_ptr()[static_cast<size_t>(e)]; q < a.csc_ptr()[static_cast<size_t>(e + 1)]; ++q) {
        int64_t u = a.csc_row()[static_cast<size_t>(q)];
        if (acc[static_cast<size_t>(u)] == 0.0) touched.push_back(u);
        acc[static_cast<size_t>(u)] += coeff;
      }
    }
    double rv = rsqrt(dv[static_cast<size_t>(v)]);
    for (int64_t u : touched) {
      emit(v, u, rv * acc[static_cast<size_t>(u)] * rsqrt(dv[static_cast<size_t>(u)]));
      acc[static_cast<size_t>(u)] = 0.0;
    }
  }
}

}  // namespace

SparseMatrix normalized_operator(const Snapshot& snapshot) {
  std::vector<SparseMatrix::Entry> entries;
  std::vector<char> has_diag(static_cast<size_t>(snapshot.num_nodes), 0);
  accumulate_smoothing(snapshot, [&](int64_t v, int64_t u, double s) {
    if (v == u) {
      entries.push_back({v, u, 1.0 - s});
      has_diag[static_cast<size_t>(v)] = 1;
    } else {
      entries.push_back({v, u, -s});
    }
  });
  for (int64_t v = 0; v < snapshot.num_nodes; ++v) {
    if (!has_diag[static_cast<size_t>(v)]) entries.push_back({v, v, 1.0});
  }
  return SparseMatrix(snapshot.num_nodes, snapshot.num_nodes, std::move(entries));
}

SparseMatrix smoothing_operator(const Snapshot& snapshot) {
  std::vector<SparseMatrix::Entry> entries;
  accumulate_smoothing(snapshot,
                       [&](int64_t v, int64_t u, double s) { entries.push_back({v, u, s}); });
  return SparseMatrix(snapshot.num_nodes, snapshot.num_nodes, std::move(entries));
}

SparseMatrix clique_mean_operator(const Snapshot& snapshot) {
  const SparseMatrix& a = *snapshot.incidence;
  std::vector<std::pair<int64_t, int64_t>> pairs;
  for (int64_t e = 0; e < a.cols(); ++e) {
    for (int64_t p = a.csc_ptr()[static_cast<size_t>(e)]; p < a.csc_ptr()[static_cast<size_t>(e + 1)]; ++p) {
      for (int64_t q = a.csc_ptr()[static_cast<size_t>(e)]; q < a.csc_ptr()[static_cast<size_t>(e + 1)]; ++q) {
        pairs.emplace_back(a.csc_row()[static_cast<size_t>(p)], a.csc_row()[static_cast<size_t>(q)]);
      }
    }
  }
  for (int64_t v = 0; v < a.rows(); ++v) pairs.emplace_back(v, v);
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  std::vector<int64_t> deg(static_cast<size_t>(a.rows()), 0);
  for (const auto& [v, u] : pairs) ++deg[static_cast<size_t>(v)];
  std::vector<SparseMatrix::Entry> entries;
  entries.reserve(pairs.size());
  for (const auto& [v, u] : pairs) {
    entries.push_back({v, u, 1.0 / static_cast<double>(deg[static_cast<size_t>(v)])});
  }
  return SparseMatrix(a.rows(), a.rows(), std::move(entries));
}

std::shared_ptr<const SparsePattern> attention_pattern(const Snapshot& snapshot) {
  const SparseMatrix& a = *snapshot.incidence;
  std::vector<std::pair<int64_t, int64_t>> pairs;
  for (int64_t e = 0; e < a.cols(); ++e) {
    for (int64_t p = a.csc_ptr()[static_cast<size_t>(e)]; p < a.csc_ptr()[static_cast<size_t>(e + 1)]; ++p) {
      for (int64_t q = a.csc_ptr()[static_cast<size_t>(e)]; q < a.csc_ptr()[static_cast<size_t>(e + 1)]; ++q) {
        pairs.emplace_back(a.csc_row()[static_cast<size_t>(p)], a.csc_row()[static_cast<size_t>(q)]);
      }
    }
  }
  for (int64_t v = 0; v < a.rows(); ++v) pairs.emplace_back(v, v);
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  return SparsePattern::build(a.rows(), a.rows(), std::move(pairs));
}

SparseMatrix drop_edge(const SparseMatrix& a, double p, uint64_t seed) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("drop_edge: rate " + std::to_string(p) + " outside [0,1)");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<SparseMatrix::Entry> kept;
  for (int64_t r = 0; r < a.rows(); ++r) {
    for (int64_t e = a.row_ptr()[static_cast<size_t>(r)]; e < a.row_ptr()[static_cast<size_t>(r + 1)]; ++e) {
      bool drop = unif(rng) < p;
      if (!drop) kept.push_back({r, a.col_index()[static_cast<size_t>(e)], a.values()[static_cast<size_t>(e)]});
    }
  }
  return SparseMatrix(a.rows(), a.cols(), std::move(kept));
}

Snapshot drop_edge(const Snapshot& snapshot, double p, uint64_t seed) {
  Snapshot out;
  out.kind = snapshot.kind;
  out.num_nodes = snapshot.num_nodes;
  out.num_edges = snapshot.num_edges;
  out.edge_weights = snapshot.edge_weights;
  out.edge_key = snapshot.edge_key;
  SparseMatrix dropped = drop_edge(*snapshot.incidence, p, seed);

  if (snapshot.kind != Snapshot::Kind::kEntityNodes) {
    out.incidence = std::make_shared<SparseMatrix>(std::move(dropped));
    return out;
  }

  // Keep only triples whose (edge, tail) incidence survived.
  std::vector<std::pair<int64_t, int64_t>> survived;  // (edge, tail)
  for (int64_t v = 0; v < dropped.rows(); ++v) {
    for (int64_t e = dropped.row_ptr()[static_cast<size_t>(v)]; e < dropped.row_ptr()[static_cast<size_t>(v + 1)]; ++e) {
      survived.emplace_back(dropped.col_index()[static_cast<size_t>(e)], v);
    }
  }
  std::sort(survived.begin(), survived.end());
  std::vector<EntityTriple> tris;
  for (int64_t k = 0; k < snapshot.triple_count(); ++k) {
    if (std::binary_search(survived.begin(), survived.end(),
                           std::make_pair(snapshot.tri_edge[static_cast<size_t>(k)],
                                          snapshot.tri_tail[static_cast<size_t>(k)]))) {
      tris.push_back({snapshot.tri_edge[static_cast<size_t>(k)],
                      snapshot.tri_tail[static_cast<size_t>(k)],
                      snapshot.tri_rel[static_cast<size_t>(k)]});
    }
  }
  finish_entity_view(out, std::move(tris));
  return out;
}

}  // namespace hyperrec
