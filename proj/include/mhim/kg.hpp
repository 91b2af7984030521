#pragma once

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mhim/params.hpp"
#include "mhim/rng.hpp"
#include "mhim/tensor.hpp"

namespace mhim {

struct Triple {
  int head = 0;
  int rel = 0;
  int tail = 0;
  bool operator==(const Triple&) const = default;
};

// Typed triplet store over dense entity/relation IDs. Items are entities
// carrying an item flag. Immutable once handed to the encoders.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;
  KnowledgeGraph(int entity_count, int relation_count)
      : entity_count_(entity_count),
        relation_count_(relation_count),
        is_item_(static_cast<size_t>(entity_count), 0) {
    if (entity_count < 0 || relation_count < 0) {
      throw std::invalid_argument("KnowledgeGraph: negative counts");
    }
  }

  int entity_count() const { return entity_count_; }
  int relation_count() const { return relation_count_; }
  const std::vector<Triple>& triples() const { return triples_; }

  void add_triple(int h, int r, int t) {
    if (h < 0 || h >= entity_count_ || t < 0 || t >= entity_count_) {
      throw std::out_of_range("KnowledgeGraph: entity id out of range");
    }
    if (r < 0 || r >= relation_count_) {
      throw std::out_of_range("KnowledgeGraph: relation id out of range");
    }
    if (!seen_.insert({h, r, t}).second) {
      throw std::invalid_argument("KnowledgeGraph: duplicate triplet");
    }
    triples_.push_back({h, r, t});
    adjacency_dirty_ = true;
  }

  bool has_triple(int h, int r, int t) const { return seen_.count({h, r, t}) > 0; }

  void mark_item(int e) {
    if (e < 0 || e >= entity_count_) throw std::out_of_range("KnowledgeGraph: item id out of range");
    is_item_[static_cast<size_t>(e)] = 1;
  }

  bool is_item(int e) const { return is_item_[static_cast<size_t>(e)] != 0; }

  std::vector<int> items() const {
    std::vector<int> out;
    for (int e = 0; e < entity_count_; ++e) {
      if (is_item_[static_cast<size_t>(e)]) out.push_back(e);
    }
    return out;
  }

  // Undirected multigraph adjacency; parallel edges keep their multiplicity
  // so walk transition probabilities follow edge counts.
  const std::vector<std::vector<int>>& undirected_adjacency() const {
    if (adjacency_dirty_) {
      adjacency_.assign(static_cast<size_t>(entity_count_), {});
      for (const auto& t : triples_) {
        adjacency_[static_cast<size_t>(t.head)].push_back(t.tail);
        if (t.tail != t.head) adjacency_[static_cast<size_t>(t.tail)].push_back(t.head);
      }
      adjacency_dirty_ = false;
    }
    return adjacency_;
  }

 private:
  int entity_count_ = 0;
  int relation_count_ = 0;
  std::vector<Triple> triples_;
  std::vector<uint8_t> is_item_;
  std::set<std::tuple<int, int, int>> seen_;
  mutable std::vector<std::vector<int>> adjacency_;
  mutable bool adjacency_dirty_ = true;
};

// A subgraph view: kept entity IDs (ascending) plus an induced graph that
// preserves the original ID space and item flags.
struct KgSubset {
  std::vector<int> entities;
  KnowledgeGraph graph;
};

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

// Entities mentioned in dialogue plus everything reachable within `hops`
// undirected hops, with the induced triplets.
inline KgSubset build_task_kg(const KnowledgeGraph& kg, const std::vector<int>& mentioned,
                              int hops = 2) {
  std::vector<int> depth(static_cast<size_t>(kg.entity_count()), -1);
  std::queue<int> frontier;
  for (int e : mentioned) {
    if (e < 0 || e >= kg.entity_count()) {
      throw std::out_of_range("build_task_kg: mentioned entity out of range");
    }
    if (depth[static_cast<size_t>(e)] == -1) {
      depth[static_cast<size_t>(e)] = 0;
      frontier.push(e);
    }
  }
  const auto& adj = kg.undirected_adjacency();
  while (!frontier.empty()) {
    const int v = frontier.front();
    frontier.pop();
    if (depth[static_cast<size_t>(v)] >= hops) continue;
    for (int u : adj[static_cast<size_t>(v)]) {
      if (depth[static_cast<size_t>(u)] == -1) {
        depth[static_cast<size_t>(u)] = depth[static_cast<size_t>(v)] + 1;
        frontier.push(u);
      }
    }
  }
  KgSubset out;
  out.graph = KnowledgeGraph(kg.entity_count(), kg.relation_count());
  for (int e = 0; e < kg.entity_count(); ++e) {
    if (depth[static_cast<size_t>(e)] >= 0) {
      out.entities.push_back(e);
      if (kg.is_item(e)) out.graph.mark_item(e);
    }
  }
  for (const auto& t : kg.triples()) {
    if (depth[static_cast<size_t>(t.head)] >= 0 && depth[static_cast<size_t>(t.tail)] >= 0) {
      out.graph.add_triple(t.head, t.rel, t.tail);
    }
  }
  return out;
}

// Keeps only whitelisted-relation triplets; the kept entities are exactly the
// vertices of the connected components those triplets span.
inline KgSubset build_extended_kg(const KnowledgeGraph& kg,
                                  const std::set<int>& relation_whitelist) {
  for (int r : relation_whitelist) {
    if (r < 0 || r >= kg.relation_count()) {
      throw std::out_of_range("build_extended_kg: relation outside KG");
    }
  }
  KgSubset out;
  out.graph = KnowledgeGraph(kg.entity_count(), kg.relation_count());
  std::vector<uint8_t> kept(static_cast<size_t>(kg.entity_count()), 0);
  for (const auto& t : kg.triples()) {
    if (relation_whitelist.count(t.rel)) {
      out.graph.add_triple(t.head, t.rel, t.tail);
      kept[static_cast<size_t>(t.head)] = 1;
      kept[static_cast<size_t>(t.tail)] = 1;
    }
  }
  for (int e = 0; e < kg.entity_count(); ++e) {
    if (kept[static_cast<size_t>(e)]) {
      out.entities.push_back(e);
      if (kg.is_item(e)) out.graph.mark_item(e);
    }
  }
  return out;
}

// Adds each triplet's inverse under a distinct relation ID (r + R).
inline KnowledgeGraph add_inverse_relations(const KnowledgeGraph& kg) {
  KnowledgeGraph out(kg.entity_count(), kg.relation_count() * 2);
  for (int e = 0; e < kg.entity_count(); ++e) {
    if (kg.is_item(e)) out.mark_item(e);
  }
  for (const auto& t : kg.triples()) out.add_triple(t.head, t.rel, t.tail);
  for (const auto& t : kg.triples()) {
    const int inv_rel = t.rel + kg.relation_count();
    if (!out.has_triple(t.tail, inv_rel, t.head)) out.add_triple(t.tail, inv_rel, t.head);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random walk with restart
// ---------------------------------------------------------------------------

struct WalkParams {
  int hops = 128;
  double restart_p = 0.5;
  int walks_per_node = 1;  // used by critical-node frequency estimation
};

// Length-`hops` walk from `start`; each step restarts to `start` with
// probability restart_p, otherwise moves to a uniform neighbor. A stranded
// vertex (no neighbors) restarts. Calls visit for the start and every step.
template <typename VisitFn>
void random_walk_with_restart(const KnowledgeGraph& kg, int start, int hops, double restart_p,
                              Rng& rng, VisitFn&& visit) {
  if (start < 0 || start >= kg.entity_count()) {
    throw std::out_of_range("random_walk_with_restart: start out of range");
  }
  if (restart_p < 0.0 || restart_p > 1.0) {
    throw std::invalid_argument("random_walk_with_restart: restart_p outside [0,1]");
  }
  const auto& adj = kg.undirected_adjacency();
  int cur = start;
  visit(cur);
  for (int step = 0; step < hops; ++step) {
    if (rng.uniform() < restart_p) {
      cur = start;
    } else {
      const auto& nbrs = adj[static_cast<size_t>(cur)];
      cur = nbrs.empty() ? start : nbrs[static_cast<size_t>(rng.uniform_int(static_cast<int>(nbrs.size())))];
    }
    visit(cur);
  }
}

// The budget-many entities with the highest visit frequency over RWR walks
// started from every entity; ties broken toward lower entity ID.
inline std::vector<int> select_critical_nodes(const KnowledgeGraph& kg, const WalkParams& params,
                                              int budget, Rng& rng) {
  if (budget < 0) throw std::invalid_argument("select_critical_nodes: negative budget");
  const int n = kg.entity_count();
  if (budget >= n) {
    std::vector<int> all(static_cast<size_t>(n));
    for (int e = 0; e < n; ++e) all[static_cast<size_t>(e)] = e;
    return all;
  }
  std::vector<int64_t> visits(static_cast<size_t>(n), 0);
  for (int v = 0; v < n; ++v) {
    for (int w = 0; w < params.walks_per_node; ++w) {
      random_walk_with_restart(kg, v, params.hops, params.restart_p, rng,
                               [&](int u) { visits[static_cast<size_t>(u)] += 1; });
    }
  }
  std::vector<int> order(static_cast<size_t>(n));
  for (int e = 0; e < n; ++e) order[static_cast<size_t>(e)] = e;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (visits[static_cast<size_t>(a)] != visits[static_cast<size_t>(b)]) {
      return visits[static_cast<size_t>(a)] > visits[static_cast<size_t>(b)];
    }
    return a < b;
  });
  std::vector<int> out(order.begin(), order.begin() + budget);
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Embedding table with a critical-node budget
// ---------------------------------------------------------------------------

// Critical entities own unique rows of the storage matrix; every other entity
// shares the single UNKNOWN row (the last one).
struct EmbeddingTable {
  Tensor storage;                // (n_critical + 1) x d
  std::vector<int> row_of_entity;
  int unknown_row = 0;
  int dim = 0;

  int rows() const { return storage.shape[0]; }

  std::vector<int> storage_rows_for(const std::vector<int>& entities) const {
    std::vector<int> rows;
    rows.reserve(entities.size());
    for (int e : entities) {
      if (e < 0 || e >= static_cast<int>(row_of_entity.size())) {
        throw std::out_of_range("EmbeddingTable: entity out of range");
      }
      rows.push_back(row_of_entity[static_cast<size_t>(e)]);
    }
    return rows;
  }

  // Differentiable lookup: one row per requested entity.
  Tensor materialize(const std::vector<int>& entities) const {
    return gather_rows(storage, storage_rows_for(entities));
  }
};

inline EmbeddingTable make_embedding_table(ParameterStore& store, const std::string& name,
                                           int entity_count, int dim,
                                           const std::vector<int>& critical_nodes, Rng& rng,
                                           Real stddev = 0.1) {
  EmbeddingTable table;
  table.dim = dim;
  table.row_of_entity.assign(static_cast<size_t>(entity_count), -1);
  int next_row = 0;
  for (int e : critical_nodes) {
    if (e < 0 || e >= entity_count) {
      throw std::out_of_range("make_embedding_table: critical node out of range");
    }
    if (table.row_of_entity[static_cast<size_t>(e)] != -1) {
      throw std::invalid_argument("make_embedding_table: duplicate critical node");
    }
    table.row_of_entity[static_cast<size_t>(e)] = next_row++;
  }
  table.unknown_row = next_row;
  for (auto& r : table.row_of_entity) {
    if (r == -1) r = table.unknown_row;
  }
  table.storage = store.add(name, Tensor::randn({next_row + 1, dim}, rng, stddev));
  return table;
}

// Rebinds an embedding table layout to storage already present in a store
// (e.g. after loading a checkpoint).
inline EmbeddingTable bind_embedding_table(ParameterStore& store, const std::string& name,
                                           int entity_count,
                                           const std::vector<int>& critical_nodes) {
  EmbeddingTable table;
  table.storage = store.get(name);
  table.dim = table.storage.shape[1];
  table.row_of_entity.assign(static_cast<size_t>(entity_count), -1);
  int next_row = 0;
  for (int e : critical_nodes) table.row_of_entity[static_cast<size_t>(e)] = next_row++;
  table.unknown_row = next_row;
  for (auto& r : table.row_of_entity) {
    if (r == -1) r = table.unknown_row;
  }
  if (table.storage.shape[0] != next_row + 1) {
    throw std::invalid_argument("bind_embedding_table: storage rows do not match critical set");
  }
  return table;
}

// ---------------------------------------------------------------------------
// R-GCN encoder
// ---------------------------------------------------------------------------

struct RgcnParams {
  Tensor theta0;                 // self-loop transform, d x d
  std::vector<Tensor> theta_r;   // one d x d transform per relation
  int layers = 1;
};

inline RgcnParams register_rgcn_params(ParameterStore& store, int relation_count, int dim,
                                       Rng& rng, Real stddev = 0.1, int layers = 1) {
  RgcnParams p;
  p.layers = layers;
  p.theta0 = store.add("rgcn.theta0", Tensor::randn({dim, dim}, rng, stddev));
  for (int r = 0; r < relation_count; ++r) {
    p.theta_r.push_back(
        store.add("rgcn.theta_r." + std::to_string(r), Tensor::randn({dim, dim}, rng, stddev)));
  }
  return p;
}

inline RgcnParams load_rgcn_params(ParameterStore& store, int relation_count, int layers = 1) {
  RgcnParams p;
  p.layers = layers;
  p.theta0 = store.get("rgcn.theta0");
  for (int r = 0; r < relation_count; ++r) {
    p.theta_r.push_back(store.get("rgcn.theta_r." + std::to_string(r)));
  }
  return p;
}

// Encoded entity representations aligned to an explicit entity list.
struct EncodedKg {
  std::vector<int> entities;
  std::unordered_map<int, int> row_index;
  Tensor reps;  // |entities| x d

  int row_of(int entity) const {
    auto it = row_index.find(entity);
    if (it == row_index.end()) throw std::out_of_range("EncodedKg: entity not encoded");
    return it->second;
  }

  Tensor rows_for(const std::vector<int>& ents) const {
    std::vector<int> rows;
    rows.reserve(ents.size());
    for (int e : ents) rows.push_back(row_of(e));
    return gather_rows(reps, rows);
  }
};

// L layers of h_i <- h_i Theta_0 + sum_r sum_{j in N_r(i)} h_j Theta_r with
// normalization constant 1 and no nonlinearity. Messages flow head -> tail;
// paired inverse relations carry the reverse direction. Propagation is
// restricted to the induced subgraph over `entities`.
inline EncodedKg rgcn_encode(const KnowledgeGraph& kg, const RgcnParams& params,
                             const EmbeddingTable& base, const std::vector<int>& entities) {
  if (entities.empty()) throw std::invalid_argument("rgcn_encode: empty entity list");
  if (static_cast<int>(params.theta_r.size()) != kg.relation_count()) {
    throw std::invalid_argument("rgcn_encode: relation weight count mismatch");
  }
  EncodedKg out;
  out.entities = entities;
  out.row_index.reserve(entities.size() * 2);
  for (size_t i = 0; i < entities.size(); ++i) {
    out.row_index[entities[i]] = static_cast<int>(i);
  }
  const int n = static_cast<int>(entities.size());

  // Per-relation local edge lists (dst_row, src_row).
  std::vector<std::vector<std::pair<int, int>>> edges(static_cast<size_t>(kg.relation_count()));
  for (const auto& t : kg.triples()) {
    auto hs = out.row_index.find(t.head);
    auto ts = out.row_index.find(t.tail);
    if (hs == out.row_index.end() || ts == out.row_index.end()) continue;
    edges[static_cast<size_t>(t.rel)].push_back({ts->second, hs->second});
  }

  Tensor x = base.materialize(entities);
  for (int layer = 0; layer < params.layers; ++layer) {
    Tensor next = matmul(x, params.theta0);
    for (int r = 0; r < kg.relation_count(); ++r) {
      if (edges[static_cast<size_t>(r)].empty()) continue;
      Tensor agg = aggregate_rows(x, edges[static_cast<size_t>(r)], n);
      next = add(next, matmul(agg, params.theta_r[static_cast<size_t>(r)]));
    }
    x = next;
  }
  out.reps = x;
  return out;
}

// ---------------------------------------------------------------------------
// File formats: KG JSON-lines, item list
// ---------------------------------------------------------------------------

inline KnowledgeGraph load_kg(const std::string& kg_path, const std::string& items_path,
                              int entity_count, int relation_count) {
  KnowledgeGraph kg(entity_count, relation_count);
  std::ifstream is(kg_path);
  if (!is) throw std::runtime_error("load_kg: cannot open " + kg_path);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      kg.add_triple(j.at("h").get<int>(), j.at("r").get<int>(), j.at("t").get<int>());
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_kg: " + kg_path + " line " + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  if (!items_path.empty()) {
    std::ifstream its(items_path);
    if (!its) throw std::runtime_error("load_kg: cannot open " + items_path);
    line_no = 0;
    while (std::getline(its, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        kg.mark_item(std::stoi(line));
      } catch (const std::exception& e) {
        throw std::runtime_error("load_kg: " + items_path + " line " + std::to_string(line_no) +
                                 ": " + e.what());
      }
    }
  }
  return kg;
}

inline void save_kg(const KnowledgeGraph& kg, const std::string& kg_path,
                    const std::string& items_path) {
  std::ofstream os(kg_path);
  if (!os) throw std::runtime_error("save_kg: cannot open " + kg_path);
  for (const auto& t : kg.triples()) {
    nlohmann::ordered_json j{{"h", t.head}, {"r", t.rel}, {"t", t.tail}};
    os << j.dump() << "\n";
  }
  if (!items_path.empty()) {
    std::ofstream its(items_path);
    if (!its) throw std::runtime_error("save_kg: cannot open " + items_path);
    for (int e : kg.items()) its << e << "\n";
  }
}

}  // namespace mhim
