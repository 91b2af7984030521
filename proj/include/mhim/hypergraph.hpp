#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mhim/corpus.hpp"
#include "mhim/kg.hpp"
#include "mhim/tensor.hpp"

namespace mhim {

// Incidence structure over entity IDs. Vertices are kept ascending, every
// hyperedge is a nonempty sorted vertex set, and every vertex belongs to at
// least one hyperedge.
struct Hypergraph {
  std::vector<int> vertices;
  std::vector<std::vector<int>> hyperedges;  // entity IDs, sorted per edge

  bool empty() const { return vertices.empty(); }
  int vertex_count() const { return static_cast<int>(vertices.size()); }
  int edge_count() const { return static_cast<int>(hyperedges.size()); }

  int vertex_row(int entity) const {
    auto it = std::lower_bound(vertices.begin(), vertices.end(), entity);
    if (it == vertices.end() || *it != entity) {
      throw std::out_of_range("Hypergraph: entity is not a vertex");
    }
    return static_cast<int>(it - vertices.begin());
  }

  // H in {0,1}^{|V| x |H|}: H[v][h] = 1 iff v belongs to h.
  Tensor incidence() const {
    Tensor h({std::max(1, vertex_count()), std::max(1, edge_count())});
    if (empty()) return h;
    for (int e = 0; e < edge_count(); ++e) {
      for (int v : hyperedges[static_cast<size_t>(e)]) h.at(vertex_row(v), e) = 1;
    }
    return h;
  }

  std::vector<int> vertex_degrees() const {
    std::vector<int> d(static_cast<size_t>(vertex_count()), 0);
    for (const auto& edge : hyperedges) {
      for (int v : edge) d[static_cast<size_t>(vertex_row(v))] += 1;
    }
    return d;
  }

  std::vector<int> edge_degrees() const {
    std::vector<int> b;
    b.reserve(hyperedges.size());
    for (const auto& edge : hyperedges) b.push_back(static_cast<int>(edge.size()));
    return b;
  }

  // The normalized propagation operator D^-1 H B^-1 H^T (row-stochastic).
  Tensor propagation() const {
    const int n = vertex_count();
    Tensor p({std::max(1, n), std::max(1, n)});
    if (empty()) return p;
    const auto d = vertex_degrees();
    for (int v : vertices) {
      if (d[static_cast<size_t>(vertex_row(v))] == 0) {
        throw std::logic_error("Hypergraph: zero-degree vertex");
      }
    }
    for (const auto& edge : hyperedges) {
      const Real inv_delta = Real(1) / static_cast<Real>(edge.size());
      for (int vi : edge) {
        const int i = vertex_row(vi);
        const Real w = inv_delta / static_cast<Real>(d[static_cast<size_t>(i)]);
        for (int vj : edge) p.at(i, vertex_row(vj)) += w;
      }
    }
    return p;
  }
};

// Builds a hypergraph from raw hyperedges: duplicates within an edge collapse,
// empty edges are dropped, vertices are the sorted union.
inline Hypergraph build_hypergraph(const std::vector<std::vector<int>>& raw_edges) {
  Hypergraph hg;
  std::set<int> vertex_set;
  for (const auto& raw : raw_edges) {
    if (raw.empty()) continue;
    std::set<int> edge(raw.begin(), raw.end());
    vertex_set.insert(edge.begin(), edge.end());
    hg.hyperedges.emplace_back(edge.begin(), edge.end());
  }
  hg.vertices.assign(vertex_set.begin(), vertex_set.end());
  return hg;
}

// ---------------------------------------------------------------------------
// Hypergraph convolution
// ---------------------------------------------------------------------------

struct HConvParams {
  std::vector<Tensor> weights;  // W^(l), d x d per layer
};

inline HConvParams register_hconv_params(ParameterStore& store, const std::string& prefix, int d,
                                         int layers, Rng& rng, Real stddev = 0.1) {
  HConvParams p;
  for (int l = 0; l < layers; ++l) {
    p.weights.push_back(
        store.add(prefix + ".w" + std::to_string(l), Tensor::randn({d, d}, rng, stddev)));
  }
  return p;
}

inline HConvParams load_hconv_params(ParameterStore& store, const std::string& prefix,
                                     int layers) {
  HConvParams p;
  for (int l = 0; l < layers; ++l) p.weights.push_back(store.get(prefix + ".w" + std::to_string(l)));
  return p;
}

// X^{(l+1)} = D^-1 H B^-1 H^T X^{(l)} W^{(l)}, no nonlinearity between layers.
// Rows of X align with the hypergraph's ascending vertex order.
inline Tensor hconv(const Hypergraph& hg, const Tensor& x, const HConvParams& params) {
  if (hg.empty()) throw std::invalid_argument("hconv: empty hypergraph");
  if (x.shape[0] != hg.vertex_count()) {
    throw std::invalid_argument("hconv: row count does not match vertex count");
  }
  if (params.weights.empty()) throw std::invalid_argument("hconv: no layer weights");
  Tensor propagate = hg.propagation();  // constant, no grad
  Tensor out = x;
  for (const Tensor& w : params.weights) {
    if (w.shape[0] != x.shape[1] || w.shape[1] != x.shape[1]) {
      throw std::invalid_argument("hconv: weight matrix must be d x d");
    }
    out = matmul(matmul(propagate, out), w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Session-based hypergraph
// ---------------------------------------------------------------------------

// One hyperedge per historical session holding its item mentions, item order
// ignored; sessions without items are dropped. Vertices equal I_H.
inline Hypergraph build_session_hypergraph(const UserHistory& history) {
  std::vector<std::vector<int>> edges;
  for (const Session* s : history.sessions) edges.push_back(session_item_mentions(*s));
  return build_hypergraph(edges);
}

// ---------------------------------------------------------------------------
// Knowledge-based hypergraph
// ---------------------------------------------------------------------------

struct KnowledgeHypergraph {
  Hypergraph hg;
  std::vector<int> hyperedge_items;  // hyperedge index -> historical item, ascending I_H order
};

// One hyperedge per historical item: the item plus its N-hop KG neighborhood.
inline KnowledgeHypergraph build_knowledge_hypergraph(const UserHistory& history,
                                                      const KnowledgeGraph& kg, int n_hops = 1) {
  KnowledgeHypergraph out;
  std::vector<std::vector<int>> edges;
  for (int item : history.historical_items) {
    if (item < 0 || item >= kg.entity_count()) {
      throw std::out_of_range("build_knowledge_hypergraph: historical item outside KG");
    }
    KgSubset neighborhood = build_task_kg(kg, std::vector<int>{item}, n_hops);
    edges.push_back(neighborhood.entities);
    out.hyperedge_items.push_back(item);
  }
  out.hg = build_hypergraph(edges);
  return out;
}

// ---------------------------------------------------------------------------
// Hyperedge extension with similar dialogues
// ---------------------------------------------------------------------------

struct CandidateHyperedge {
  std::string session_id;
  std::vector<int> items;  // sorted
};

using HyperedgeCollection = std::vector<CandidateHyperedge>;

// Session hyperedges of the given corpus sessions (typically the train split).
inline HyperedgeCollection collect_session_hyperedges(const DialogueCorpus& corpus,
                                                      const std::vector<std::string>& session_ids) {
  std::set<std::string> wanted(session_ids.begin(), session_ids.end());
  HyperedgeCollection out;
  for (const auto& s : corpus.sessions) {
    if (!wanted.count(s.session_id)) continue;
    auto items = session_item_mentions(s);
    if (!items.empty()) out.push_back({s.session_id, std::move(items)});
  }
  return out;
}

inline double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::set<int> sa(a.begin(), a.end());
  std::set<int> sb(b.begin(), b.end());
  size_t inter = 0;
  for (int v : sa) inter += sb.count(v);
  const size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct ExtensionParams {
  int k_max = 10;
  double gamma = 1.0;
};

// Appends the top-k candidates by common-item ratio against the current
// dialogue's items, with k = min(k_max, ceil(gamma * |own hyperedges|)).
// Ties rank by lower session ID. `exclude_session_id` drops the candidate
// that is the current session itself (train-time self match).
inline Hypergraph extend_hyperedges(const std::vector<int>& current_items,
                                    const HyperedgeCollection& collection, const Hypergraph& hg,
                                    const ExtensionParams& params,
                                    const std::string* exclude_session_id = nullptr) {
  if (current_items.empty() || hg.edge_count() == 0) return hg;
  const int k = std::min<int>(params.k_max,
                              static_cast<int>(std::ceil(params.gamma * hg.edge_count())));
  if (k <= 0) return hg;

  struct Scored {
    double score;
    const CandidateHyperedge* candidate;
  };
  std::vector<Scored> scored;
  for (const auto& cand : collection) {
    if (exclude_session_id && cand.session_id == *exclude_session_id) continue;
    const double s = jaccard(current_items, cand.items);
    if (s > 0) scored.push_back({s, &cand});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.candidate->session_id < b.candidate->session_id;
  });
  if (scored.size() > static_cast<size_t>(k)) scored.resize(static_cast<size_t>(k));

  std::vector<std::vector<int>> edges = hg.hyperedges;
  for (const auto& s : scored) edges.push_back(s.candidate->items);
  return build_hypergraph(edges);
}

// ---------------------------------------------------------------------------
// Session / knowledge convolution entry points
// ---------------------------------------------------------------------------

// N_S: session-hypergraph-convolved reps for I_H (rows in ascending item
// order). Extension, when configured, runs before the convolution and the
// result is sliced back to I_H rows. Empty history gives an undefined tensor.
inline Tensor session_conv(const UserHistory& history, const EncodedKg& enc,
                           const HConvParams& params,
                           const std::vector<int>* current_items = nullptr,
                           const HyperedgeCollection* collection = nullptr,
                           const ExtensionParams* extension = nullptr,
                           const std::string* exclude_session_id = nullptr) {
  Hypergraph hg = build_session_hypergraph(history);
  if (hg.empty()) return Tensor{};
  if (current_items && collection && extension) {
    hg = extend_hyperedges(*current_items, *collection, hg, *extension, exclude_session_id);
  }
  Tensor x = enc.rows_for(hg.vertices);
  Tensor convolved = hconv(hg, x, params);
  if (hg.vertices == history.historical_items) return convolved;
  std::vector<int> rows;
  rows.reserve(history.historical_items.size());
  for (int item : history.historical_items) rows.push_back(hg.vertex_row(item));
  return gather_rows(convolved, rows);
}

// N_K: knowledge-hypergraph convolution followed by per-hyperedge mean
// pooling; one row per historical item, ascending I_H order.
inline Tensor knowledge_conv(const UserHistory& history, const KnowledgeGraph& kg,
                             const EncodedKg& enc, const HConvParams& params, int n_hops = 1) {
  KnowledgeHypergraph khg = build_knowledge_hypergraph(history, kg, n_hops);
  if (khg.hg.empty()) return Tensor{};
  Tensor x = enc.rows_for(khg.hg.vertices);
  Tensor convolved = hconv(khg.hg, x, params);
  // Mean pooling per hyperedge via a constant pooling matrix.
  const int n_items = static_cast<int>(khg.hyperedge_items.size());
  Tensor pool({n_items, khg.hg.vertex_count()});
  for (int e = 0; e < n_items; ++e) {
    const auto& members = khg.hg.hyperedges[static_cast<size_t>(e)];
    const Real w = Real(1) / static_cast<Real>(members.size());
    for (int v : members) pool.at(e, khg.hg.vertex_row(v)) = w;
  }
  return matmul(pool, convolved);
}

}  // namespace mhim
