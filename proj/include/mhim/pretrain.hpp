#pragma once

#include <deque>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mhim/kg.hpp"
#include "mhim/params.hpp"
#include "mhim/tensor.hpp"

namespace mhim {

// ---------------------------------------------------------------------------
// Subgraph instances
// ---------------------------------------------------------------------------

struct SubgraphInstance {
  int start = -1;
  std::vector<int> vertices;  // ascending, always contains start
  std::vector<Triple> edges;  // induced by the vertex set
};

// RWR-collected vertex set plus the KG edges induced among them.
inline SubgraphInstance sample_subgraph(const KnowledgeGraph& kg, int v, int hops,
                                        double restart_p, Rng& rng) {
  SubgraphInstance out;
  out.start = v;
  std::set<int> visited;
  random_walk_with_restart(kg, v, hops, restart_p, rng, [&](int u) { visited.insert(u); });
  out.vertices.assign(visited.begin(), visited.end());
  for (const auto& t : kg.triples()) {
    if (visited.count(t.head) && visited.count(t.tail)) out.edges.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoders and contrastive state
// ---------------------------------------------------------------------------

// R-GCN encoder bundle: a parameter store holding "rgcn.theta0",
// "rgcn.theta_r.<id>" and "emb.table", plus the table layout.
struct ContrastiveEncoder {
  ParameterStore store;
  EmbeddingTable table;
  RgcnParams rgcn;
};

inline ContrastiveEncoder make_contrastive_encoder(const KnowledgeGraph& kg, int dim,
                                                   const std::vector<int>& critical_nodes,
                                                   Rng& rng, int layers = 1) {
  ContrastiveEncoder enc;
  enc.rgcn = register_rgcn_params(enc.store, kg.relation_count(), dim, rng, 0.1, layers);
  enc.table = make_embedding_table(enc.store, "emb.table", kg.entity_count(), dim, critical_nodes,
                                   rng, 0.1);
  return enc;
}

// Clone with identical values; the key encoder starts as a copy of the query.
inline ContrastiveEncoder clone_encoder(const ContrastiveEncoder& src, int entity_count,
                                        const std::vector<int>& critical_nodes, int layers,
                                        int relation_count) {
  ContrastiveEncoder enc;
  enc.store = src.store.clone();
  for (auto& [name, t] : enc.store) t.set_requires_grad(true);
  enc.rgcn = load_rgcn_params(enc.store, relation_count, layers);
  enc.table = bind_embedding_table(enc.store, "emb.table", entity_count, critical_nodes);
  return enc;
}

struct ContrastiveState {
  ContrastiveEncoder query;  // Theta_q: trained by gradient
  ContrastiveEncoder key;    // Theta_k: momentum-updated only, discarded after pre-training
  Real momentum = 0.999;     // m in [0, 1)
  Real temperature = 0.07;
  size_t queue_capacity = 256;
  std::deque<std::vector<Real>> queue;  // FIFO of unit-norm key vectors
};

inline ContrastiveState make_contrastive_state(const KnowledgeGraph& kg, int dim,
                                               const std::vector<int>& critical_nodes, Rng& rng,
                                               Real momentum = 0.999, Real temperature = 0.07,
                                               size_t queue_capacity = 256, int layers = 1) {
  if (momentum < 0 || momentum >= 1) {
    throw std::invalid_argument("ContrastiveState: momentum must lie in [0,1)");
  }
  if (temperature <= 0) throw std::invalid_argument("ContrastiveState: temperature must be > 0");
  ContrastiveState state;
  state.query = make_contrastive_encoder(kg, dim, critical_nodes, rng, layers);
  state.key = clone_encoder(state.query, kg.entity_count(), critical_nodes, layers,
                            kg.relation_count());
  state.momentum = momentum;
  state.temperature = temperature;
  state.queue_capacity = queue_capacity;
  return state;
}

// ---------------------------------------------------------------------------
// Subgraph representation
// ---------------------------------------------------------------------------

// Encodes the instance's vertices with the KG encoder restricted to the
// instance, sums the rows, and L2-normalizes. A zero sum is degenerate.
inline Tensor subgraph_repr(const KnowledgeGraph& kg, const SubgraphInstance& instance,
                            const ContrastiveEncoder& encoder) {
  if (instance.vertices.empty()) throw std::invalid_argument("subgraph_repr: empty instance");
  EncodedKg enc = rgcn_encode(kg, encoder.rgcn, encoder.table, instance.vertices);
  Tensor summed = enc.reps.shape[0] == 1 ? enc.reps : matmul(
      Tensor::full({1, enc.reps.shape[0]}, Real(1)), enc.reps);
  return l2_normalize(summed);
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

// -log( exp(q.k+ / tau) / sum_{i=0..M} exp(q.k_i / tau) ) where the denominator
// runs over the positive key and the queue. Queue keys are constants.
inline Tensor info_nce(const Tensor& q, const std::vector<Real>& k_pos,
                       const std::deque<std::vector<Real>>& queue, Real temperature) {
  if (temperature <= 0) throw std::invalid_argument("info_nce: temperature must be > 0");
  const int d = static_cast<int>(q.numel());
  if (static_cast<int>(k_pos.size()) != d) {
    throw std::invalid_argument("info_nce: positive key dimension mismatch");
  }
  const int m = static_cast<int>(queue.size());
  // Keys as a constant d x (M+1) matrix, positive first.
  Tensor keys({d, m + 1});
  for (int r = 0; r < d; ++r) keys.at(r, 0) = k_pos[static_cast<size_t>(r)];
  for (int c = 0; c < m; ++c) {
    const auto& k = queue[static_cast<size_t>(c)];
    if (static_cast<int>(k.size()) != d) throw std::invalid_argument("info_nce: queue dim mismatch");
    for (int r = 0; r < d; ++r) keys.at(r, c + 1) = k[static_cast<size_t>(r)];
  }
  Tensor qrow = q;
  qrow.shape = {1, d};  // view the query as a row
  Tensor logits = scale(matmul(qrow, keys), Real(1) / temperature);
  return scale(pick(log_softmax(logits, 1), 0), Real(-1));
}

// ---------------------------------------------------------------------------
// Momentum update
// ---------------------------------------------------------------------------

// Theta_k <- m Theta_k + (1 - m) Theta_q, elementwise.
inline void momentum_update(ContrastiveState& state) {
  auto qit = state.query.store.begin();
  auto kit = state.key.store.begin();
  for (; qit != state.query.store.end() && kit != state.key.store.end(); ++qit, ++kit) {
    if (qit->first != kit->first || !qit->second.same_shape(kit->second)) {
      throw std::logic_error("momentum_update: encoder parameter layout drift");
    }
    auto& kd = *kit->second.data;
    const auto& qd = *qit->second.data;
    for (size_t i = 0; i < kd.size(); ++i) {
      kd[i] = state.momentum * kd[i] + (Real(1) - state.momentum) * qd[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Pre-training epoch
// ---------------------------------------------------------------------------

// One pass over the vertex pool in shuffled batches. Per batch: two RWR
// subgraphs per start vertex, queries through Theta_q, keys through Theta_k
// (no gradient), InfoNCE against the queue, Adam on Theta_q only, momentum
// update, then the batch's keys join the queue with FIFO eviction.
inline Real pretrain_epoch(const KnowledgeGraph& kg, const std::vector<int>& vertex_pool,
                           ContrastiveState& state, AdamState& adam, int batch_size,
                           const WalkParams& walk, Rng& rng, Real lr_scale = 1.0) {
  if (batch_size <= 0) throw std::invalid_argument("pretrain_epoch: batch size must be positive");
  if (static_cast<int>(vertex_pool.size()) < batch_size) {
    throw std::invalid_argument("pretrain_epoch: fewer vertices than batch size");
  }
  if (state.queue_capacity < static_cast<size_t>(batch_size)) {
    throw std::invalid_argument("pretrain_epoch: queue capacity below batch size");
  }
  std::vector<int> pool = vertex_pool;
  rng.shuffle(pool);
  const size_t n_batches = pool.size() / static_cast<size_t>(batch_size);
  Real loss_sum = 0;
  for (size_t b = 0; b < n_batches; ++b) {
    state.query.store.zero_grad();
    std::vector<Tensor> losses;
    std::vector<std::vector<Real>> new_keys;
    for (int i = 0; i < batch_size; ++i) {
      const int v = pool[b * static_cast<size_t>(batch_size) + static_cast<size_t>(i)];
      SubgraphInstance gq = sample_subgraph(kg, v, walk.hops, walk.restart_p, rng);
      SubgraphInstance gk = sample_subgraph(kg, v, walk.hops, walk.restart_p, rng);
      Tensor q = subgraph_repr(kg, gq, state.query);
      std::vector<Real> k;
      {
        NoGradGuard no_grad;
        Tensor kt = subgraph_repr(kg, gk, state.key);
        k = *kt.data;
      }
      losses.push_back(info_nce(q, k, state.queue, state.temperature));
      new_keys.push_back(std::move(k));
    }
    Tensor batch_loss = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) batch_loss = add(batch_loss, losses[i]);
    batch_loss = scale(batch_loss, Real(1) / static_cast<Real>(losses.size()));
    backward(batch_loss);
    adam_step(state.query.store, adam, lr_scale);
    momentum_update(state);
    for (auto& k : new_keys) {
      state.queue.push_back(std::move(k));
      while (state.queue.size() > state.queue_capacity) state.queue.pop_front();
    }
    loss_sum += batch_loss.value();
  }
  return loss_sum / static_cast<Real>(n_batches);
}

}  // namespace mhim
