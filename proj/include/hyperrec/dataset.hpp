#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace hyperrec {

// Implicit-feedback interaction matrix as a sparse set of (user, item) pairs
// over densely re-indexed ids.
struct InteractionSet {
  int64_t num_users = 0;
  int64_t num_items = 0;
  std::vector<std::pair<int64_t, int64_t>> pairs;  // sorted, unique

  // dense id -> id from the source file
  std::vector<int64_t> user_original;
  std::vector<int64_t> item_original;

  std::vector<std::vector<int64_t>> items_by_user() const;
  std::vector<int64_t> interaction_count_by_user() const;
  bool contains(int64_t user, int64_t item) const;
};

// Knowledge triples over a dense entity/relation id space, closed under
// inversion. Entity ids are partitioned as [0, num_items) items,
// [num_items, num_entities) other knowledge entities, and - once users are
// merged in - [num_entities, num_entities + num_users) users. Canonical
// relation id 0 is reserved for the interaction relation; the inverse of a
// canonical relation r is r + canonical_relations.
struct TripleStore {
  struct Triple {
    int64_t head;
    int64_t rel;
    int64_t tail;
    auto operator<=>(const Triple&) const = default;
  };

  int64_t num_items = 0;
  int64_t num_entities = 0;  // items + other knowledge entities
  int64_t num_users = 0;     // 0 until users are merged in
  int64_t canonical_relations = 1;  // includes the reserved interaction slot 0
  int64_t kg_relations = 0;         // distinct relations seen in the source file
  int64_t source_triples = 0;       // triples read before inverse closure
  std::vector<Triple> triples;      // sorted, unique, closed under inversion

  std::vector<int64_t> entity_original;    // dense -> source id (-1 for users)
  std::vector<int64_t> relation_original;  // canonical dense -> source id (-1 for slot 0)

  int64_t total_nodes() const { return num_entities + num_users; }
  int64_t directed_relations() const { return 2 * canonical_relations; }
  int64_t inverse_of(int64_t rel) const {
    return rel < canonical_relations ? rel + canonical_relations : rel - canonical_relations;
  }

  enum class NodeType { kItem, kEntity, kUser };
  NodeType node_type(int64_t id) const {
    if (id < num_items) return NodeType::kItem;
    if (id < num_entities) return NodeType::kEntity;
    return NodeType::kUser;
  }
  int64_t user_node(int64_t user) const { return num_entities + user; }
};

// Tab-separated `user \t item [\t rating [\t timestamp]]`; extra columns are
// ignored, ratings below the threshold are dropped, ids re-indexed densely in
// first-appearance order, duplicates collapsed.
InteractionSet load_interactions(const std::string& path, double rating_threshold = 0.0);

// Tab-separated `head \t relation \t tail` integer ids. When `item_ids` is
// given (source item id in first-appearance order, as produced by
// load_interactions), those ids map onto the dense item range and everything
// else is appended after it; otherwise entities are indexed by appearance.
TripleStore load_kg(const std::string& path, const std::vector<int64_t>* item_ids = nullptr);

// Unified store over entities plus users: every interaction becomes a triple
// (user, interact, item) together with its inverse.
TripleStore build_ckhg(const InteractionSet& interactions, const TripleStore& kg);

struct DatasetSplit {
  InteractionSet train;
  InteractionSet validation;
  InteractionSet test;
};

// Per-user stratified random split; every user keeps at least one training
// interaction. `ratios` are (train, validation, test) and must sum to 1.
DatasetSplit split_dataset(const InteractionSet& interactions,
                           const std::array<double, 3>& ratios, uint64_t seed);

// TSV `original_id \t dense_id` per line.
void write_id_map(const std::string& path, const std::vector<int64_t>& original);

}  // namespace hyperrec
