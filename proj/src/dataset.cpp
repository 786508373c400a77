#include "hyperrec/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string_view>
#include <unordered_map>

namespace hyperrec {

namespace {

[[noreturn]] void parse_error(const std::string& path, int64_t line, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

int64_t parse_int(std::string_view tok, const std::string& path, int64_t line) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    parse_error(path, line, "expected integer, got '" + std::string(tok) + "'");
  }
  return v;
}

double parse_double(std::string_view tok, const std::string& path, int64_t line) {
  try {
    size_t used = 0;
    double v = std::stod(std::string(tok), &used);
    if (used != tok.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    parse_error(path, line, "expected number, got '" + std::string(tok) + "'");
  }
}

}  // namespace

std::vector<std::vector<int64_t>> InteractionSet::items_by_user() const {
  std::vector<std::vector<int64_t>> by_user(static_cast<size_t>(num_users));
  for (const auto& [u, i] : pairs) by_user[static_cast<size_t>(u)].push_back(i);
  return by_user;
}

std::vector<int64_t> InteractionSet::interaction_count_by_user() const {
  std::vector<int64_t> counts(static_cast<size_t>(num_users), 0);
  for (const auto& [u, i] : pairs) ++counts[static_cast<size_t>(u)];
  return counts;
}

bool InteractionSet::contains(int64_t user, int64_t item) const {
  return std::binary_search(pairs.begin(), pairs.end(), std::make_pair(user, item));
}

InteractionSet load_interactions(const std::string& path, double rating_threshold) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_interactions: cannot open " + path);

  InteractionSet set;
  std::unordered_map<int64_t, int64_t> user_map, item_map;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split_tabs(line);
    if (cols.size() < 2) parse_error(path, lineno, "expected at least 2 tab-separated columns");
    int64_t user = parse_int(cols[0], path, lineno);
    int64_t item = parse_int(cols[1], path, lineno);
    double rating = cols.size() >= 3 ? parse_double(cols[2], path, lineno) : 1.0;
    if (rating < rating_threshold) continue;

    auto [uit, unew] = user_map.try_emplace(user, static_cast<int64_t>(set.user_original.size()));
    if (unew) set.user_original.push_back(user);
    auto [iit, inew] = item_map.try_emplace(item, static_cast<int64_t>(set.item_original.size()));
    if (inew) set.item_original.push_back(item);
    set.pairs.emplace_back(uit->second, iit->second);
  }
  if (set.pairs.empty()) {
    throw std::runtime_error("load_interactions: no interactions in " + path);
  }
  std::sort(set.pairs.begin(), set.pairs.end());
  set.pairs.erase(std::unique(set.pairs.begin(), set.pairs.end()), set.pairs.end());
  set.num_users = static_cast<int64_t>(set.user_original.size());
  set.num_items = static_cast<int64_t>(set.item_original.size());
  return set;
}

TripleStore load_kg(const std::string& path, const std::vector<int64_t>* item_ids) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_kg: cannot open " + path);

  TripleStore store;
  std::unordered_map<int64_t, int64_t> entity_map, relation_map;
  if (item_ids) {
    store.num_items = static_cast<int64_t>(item_ids->size());
    for (size_t i = 0; i < item_ids->size(); ++i) {
      entity_map.emplace((*item_ids)[i], static_cast<int64_t>(i));
      store.entity_original.push_back((*item_ids)[i]);
    }
  }
  store.relation_original.push_back(-1);  // reserved interaction slot

  auto entity_id = [&](int64_t src) {
    auto [it, fresh] = entity_map.try_emplace(src, static_cast<int64_t>(store.entity_original.size()));
    if (fresh) store.entity_original.push_back(src);
    return it->second;
  };

  std::vector<TripleStore::Triple> raw;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split_tabs(line);
    if (cols.size() < 3) parse_error(path, lineno, "expected 3 tab-separated columns");
    int64_t head = parse_int(cols[0], path, lineno);
    int64_t rel = parse_int(cols[1], path, lineno);
    int64_t tail = parse_int(cols[2], path, lineno);
    auto [rit, rnew] =
        relation_map.try_emplace(rel, static_cast<int64_t>(store.relation_original.size()));
    if (rnew) store.relation_original.push_back(rel);
    raw.push_back({entity_id(head), rit->second, entity_id(tail)});
  }
  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());

  store.num_entities = static_cast<int64_t>(store.entity_original.size());
  store.kg_relations = static_cast<int64_t>(relation_map.size());
  store.canonical_relations = 1 + store.kg_relations;
  store.source_triples = static_cast<int64_t>(raw.size());

  store.triples.reserve(raw.size() * 2);
  for (const auto& t : raw) {
    store.triples.push_back(t);
    store.triples.push_back({t.tail, t.rel + store.canonical_relations, t.head});
  }
  std::sort(store.triples.begin(), store.triples.end());
  store.triples.erase(std::unique(store.triples.begin(), store.triples.end()),
                      store.triples.end());
  return store;
}

TripleStore build_ckhg(const InteractionSet& interactions, const TripleStore& kg) {
  TripleStore store = kg;
  if (store.num_entities == 0) {
    // No knowledge graph: the entity space is just the items.
    store.num_items = interactions.num_items;
    store.num_entities = interactions.num_items;
    store.entity_original = interactions.item_original;
    store.canonical_relations = 1;
    store.kg_relations = 0;
    if (store.relation_original.empty()) store.relation_original.push_back(-1);
  }
  if (store.num_users != 0) {
    throw std::invalid_argument("build_ckhg: store already contains users");
  }
  if (store.num_items != interactions.num_items) {
    throw std::invalid_argument(
        "build_ckhg: item space mismatch between interactions (" +
        std::to_string(interactions.num_items) + ") and knowledge triples (" +
        std::to_string(store.num_items) + "); user and entity id spaces must be disjoint");
  }

  // Interaction relation ids must survive the relation re-count: slot 0 is
  // canonical interact, its inverse sits at canonical_relations. Knowledge
  // triples already use this layout.
  store.num_users = interactions.num_users;
  int64_t interact = 0;
  int64_t interact_inv = store.canonical_relations;
  store.triples.reserve(store.triples.size() + interactions.pairs.size() * 2);
  for (const auto& [u, i] : interactions.pairs) {
    int64_t un = store.user_node(u);
    store.triples.push_back({un, interact, i});
    store.triples.push_back({i, interact_inv, un});
  }
  std::sort(store.triples.begin(), store.triples.end());
  store.triples.erase(std::unique(store.triples.begin(), store.triples.end()),
                      store.triples.end());
  return store;
}

DatasetSplit split_dataset(const InteractionSet& interactions,
                           const std::array<double, 3>& ratios, uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: ratios sum to " + std::to_string(sum) +
                                ", expected 1");
  }

  DatasetSplit split;
  for (InteractionSet* s : {&split.train, &split.validation, &split.test}) {
    s->num_users = interactions.num_users;
    s->num_items = interactions.num_items;
    s->user_original = interactions.user_original;
    s->item_original = interactions.item_original;
  }

  std::mt19937_64 rng(seed);
  auto by_user = interactions.items_by_user();
  for (int64_t u = 0; u < interactions.num_users; ++u) {
    auto& items = by_user[static_cast<size_t>(u)];
    std::shuffle(items.begin(), items.end(), rng);
    int64_t n = static_cast<int64_t>(items.size());
    int64_t n_val = static_cast<int64_t>(std::floor(static_cast<double>(n) * ratios[1]));
    int64_t n_test = static_cast<int64_t>(std::floor(static_cast<double>(n) * ratios[2]));
    int64_t n_train = n - n_val - n_test;
    if (n_train == 0) {
      if (n_test > 0) {
        --n_test;
      } else {
        --n_val;
      }
      ++n_train;
    }
    int64_t k = 0;
    for (; k < n_train; ++k) split.train.pairs.emplace_back(u, items[static_cast<size_t>(k)]);
    for (; k < n_train + n_val; ++k)
      split.validation.pairs.emplace_back(u, items[static_cast<size_t>(k)]);
    for (; k < n; ++k) split.test.pairs.emplace_back(u, items[static_cast<size_t>(k)]);
  }
  for (InteractionSet* s : {&split.train, &split.validation, &split.test}) {
    std::sort(s->pairs.begin(), s->pairs.end());
  }
  return split;
}

void write_id_map(const std::string& path, const std::vector<int64_t>& original) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_id_map: cannot open " + path);
  for (size_t dense = 0; dense < original.size(); ++dense) {
    out << original[dense] << '\t' << dense << '\n';
  }
}

}  // namespace hyperrec
