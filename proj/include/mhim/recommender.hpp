#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "mhim/corpus.hpp"
#include "mhim/hypergraph.hpp"
#include "mhim/kg.hpp"
#include "mhim/metrics.hpp"
#include "mhim/nn.hpp"
#include "mhim/params.hpp"

namespace mhim {

// ---------------------------------------------------------------------------
// Interest fusion and user representation
// ---------------------------------------------------------------------------

// N_SK = MHA(query = N_C, key = value = [N_S; N_K]). Undefined N_S / N_K rows
// are skipped; with no history at all the result is undefined and the caller
// falls back to the current session alone.
inline Tensor fuse_interest(const Tensor& n_c, const Tensor& n_s, const Tensor& n_k,
                            const MhaParams& params, int heads) {
  if (!n_c.defined() || n_c.rows() == 0) {
    throw std::invalid_argument("fuse_interest: no current-session entities");
  }
  std::vector<Tensor> keys;
  if (n_s.defined() && n_s.rows() > 0) keys.push_back(n_s);
  if (n_k.defined() && n_k.rows() > 0) keys.push_back(n_k);
  if (keys.empty()) return Tensor{};
  Tensor kv = keys.size() == 1 ? keys[0] : concat_rows(keys);
  return multi_head_attention(n_c, kv, kv, heads, params);
}

// u = MeanPool([MeanPool(N_SK); N_C]); with N_SK empty, u = MeanPool(N_C).
inline Tensor user_repr(const Tensor& n_sk, const Tensor& n_c) {
  const bool have_sk = n_sk.defined() && n_sk.rows() > 0;
  const bool have_c = n_c.defined() && n_c.rows() > 0;
  if (!have_c && !have_sk) throw std::invalid_argument("user_repr: nothing to pool");
  if (!have_sk) return mean_rows(n_c);
  if (!have_c) return mean_rows(n_sk);
  return mean_rows(concat_rows(mean_rows(n_sk), n_c));
}

// P_rec = softmax(u . N_I^T) over the item catalog.
inline Tensor score_items(const Tensor& u, const Tensor& item_table) {
  if (!item_table.defined() || item_table.rows() == 0) {
    throw std::invalid_argument("score_items: empty item table");
  }
  return softmax(matmul(u, transpose2d(item_table)), 1);
}

// Multi-class cross-entropy, mean over the batch: -(1/B) sum_j log P^(j)(y_j).
inline Tensor rec_loss(const std::vector<Tensor>& p_recs, const std::vector<int>& targets) {
  if (p_recs.empty() || p_recs.size() != targets.size()) {
    throw std::invalid_argument("rec_loss: batch size mismatch");
  }
  Tensor sum;
  for (size_t j = 0; j < p_recs.size(); ++j) {
    const int t = targets[j];
    if (t < 0 || t >= p_recs[j].cols()) throw std::out_of_range("rec_loss: target out of range");
    Tensor nll = scale(log(pick(p_recs[j], t)), Real(-1));
    sum = j == 0 ? nll : add(sum, nll);
  }
  return scale(sum, Real(1) / static_cast<Real>(p_recs.size()));
}

// ---------------------------------------------------------------------------
// Recommendation examples
// ---------------------------------------------------------------------------

// One example per ground-truth item in a system turn: the context is every
// utterance before that turn within the current session.
struct RecExample {
  std::string session_id;
  std::string user_id;
  int session_order = 0;
  int turn = 0;
  int target = -1;
  std::vector<int> context_entities;  // first-mention order, deduplicated
  std::vector<int> context_items;     // item mentions so far (hyperedge extension key)
};

inline std::vector<RecExample> extract_rec_examples(const DialogueCorpus& corpus,
                                                    const std::vector<std::string>& session_ids,
                                                    int* skipped_no_context = nullptr) {
  std::set<std::string> wanted(session_ids.begin(), session_ids.end());
  std::vector<RecExample> out;
  int skipped = 0;
  for (const auto& s : corpus.sessions) {
    if (!wanted.count(s.session_id)) continue;
    std::vector<int> entities;
    std::unordered_set<int> seen;
    std::vector<int> items;
    std::unordered_set<int> item_seen;
    for (size_t turn = 0; turn < s.utterances.size(); ++turn) {
      const Utterance& u = s.utterances[turn];
      if (u.speaker == Speaker::system && !u.items.empty()) {
        if (entities.empty()) {
          skipped += static_cast<int>(u.items.size());
        } else {
          for (int target : u.items) {
            RecExample ex;
            ex.session_id = s.session_id;
            ex.user_id = s.user_id;
            ex.session_order = s.order;
            ex.turn = static_cast<int>(turn);
            ex.target = target;
            ex.context_entities = entities;
            ex.context_items = items;
            out.push_back(std::move(ex));
          }
        }
      }
      for (int e : u.entities) {
        if (seen.insert(e).second) entities.push_back(e);
      }
      for (int it : u.items) {
        if (item_seen.insert(it).second) items.push_back(it);
      }
    }
  }
  if (skipped_no_context) *skipped_no_context = skipped;
  return out;
}

// ---------------------------------------------------------------------------
// Recommender model
// ---------------------------------------------------------------------------

struct RecConfig {
  int dim = 128;
  int heads = 2;
  int rgcn_layers = 1;
  int hconv_layers = 1;
  int n_hops = 1;            // knowledge hyperedge neighborhood
  int history_cap = 10;      // most recent sessions kept
  bool use_session = true;
  bool use_knowledge = true;
  bool use_extension = true;
  ExtensionParams extension;
  Real init_std = 0.1;
};

// The end-to-end trainable recommendation pipeline. Parameter names:
// emb.table, rgcn.*, hconv.session.*, hconv.knowledge.*, fuse.*.
struct RecModel {
  ParameterStore store;
  RecConfig config;
  EmbeddingTable table;
  RgcnParams rgcn;
  HConvParams hconv_session;
  HConvParams hconv_knowledge;
  MhaParams fuse;
  KnowledgeGraph enc_kg;            // inverse-augmented graph for the encoder
  std::vector<int> model_entities;  // entities the encoder covers (ascending)
  std::vector<int> items;           // the candidate catalog, ascending
};

inline RecModel make_rec_model(const KnowledgeGraph& kg, const DialogueCorpus& corpus,
                               const RecConfig& config, const std::vector<int>& critical_nodes,
                               Rng& rng) {
  RecModel model;
  model.config = config;
  KgSubset task = build_task_kg(kg, corpus);
  std::set<int> entity_set(task.entities.begin(), task.entities.end());
  for (int item : kg.items()) entity_set.insert(item);
  model.model_entities.assign(entity_set.begin(), entity_set.end());
  model.items = kg.items();
  if (model.items.empty()) throw std::invalid_argument("make_rec_model: KG has no items");

  // The encoder runs over the task KG with inverse relations added.
  model.enc_kg = add_inverse_relations(task.graph);

  Rng init = rng.substream("rec.init");
  model.rgcn = register_rgcn_params(model.store, model.enc_kg.relation_count(), config.dim, init,
                                    config.init_std, config.rgcn_layers);
  model.table = make_embedding_table(model.store, "emb.table", kg.entity_count(), config.dim,
                                     critical_nodes, init, config.init_std);
  model.hconv_session =
      register_hconv_params(model.store, "hconv.session", config.dim, config.hconv_layers, init,
                            config.init_std);
  model.hconv_knowledge =
      register_hconv_params(model.store, "hconv.knowledge", config.dim, config.hconv_layers, init,
                            config.init_std);
  model.fuse = register_mha_params(model.store, "fuse", config.dim, init, config.init_std);
  return model;
}

// Overwrites encoder parameters (rgcn.*, emb.table) with pre-trained values.
inline void load_pretrained_encoder(RecModel& model, const ParameterStore& pretrained) {
  for (const auto& [name, t] : pretrained) {
    if (!model.store.contains(name)) continue;
    Tensor& dst = model.store.get(name);
    if (!dst.same_shape(t)) {
      throw std::invalid_argument("load_pretrained_encoder: shape mismatch for " + name);
    }
    *dst.data = *t.data;
  }
}

// Encodes the model's entity universe; one tape entry per call.
inline EncodedKg encode_entities(const RecModel& model) {
  return rgcn_encode(model.enc_kg, model.rgcn, model.table, model.model_entities);
}

// Builds the user state and item distribution for one example.
// `collection` supplies hyperedge-extension candidates (train split).
struct RecForward {
  Tensor n_sk;    // fused historical reps (may be undefined)
  Tensor u;       // 1 x d
  Tensor p_rec;   // 1 x |items|
};

inline RecForward rec_forward(const RecModel& model, const DialogueCorpus& corpus,
                              const KnowledgeGraph& kg, const RecExample& ex,
                              const EncodedKg& enc,
                              const HyperedgeCollection* collection = nullptr) {
  RecForward out;
  Tensor n_c = enc.rows_for(ex.context_entities);
  UserHistory history =
      user_history(corpus, ex.user_id, ex.session_order, model.config.history_cap);
  Tensor n_s, n_k;
  if (model.config.use_session && !history.empty()) {
    const bool extend = model.config.use_extension && collection != nullptr;
    n_s = session_conv(history, enc, model.hconv_session,
                       extend ? &ex.context_items : nullptr, extend ? collection : nullptr,
                       extend ? &model.config.extension : nullptr, &ex.session_id);
  }
  if (model.config.use_knowledge && !history.empty()) {
    n_k = knowledge_conv(history, kg, enc, model.hconv_knowledge, model.config.n_hops);
  }
  out.n_sk = fuse_interest(n_c, n_s, n_k, model.fuse, model.config.heads);
  out.u = user_repr(out.n_sk, n_c);
  out.p_rec = score_items(out.u, enc.rows_for(model.items));
  return out;
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct RecTrainConfig {
  Real lr = 1e-3;
  int batch_size = 16;
  int epochs = 50;
};

struct RecEpochStats {
  Real mean_loss = 0;
  int examples = 0;
};

class RecTrainer {
 public:
  RecTrainer(RecModel& model, const DialogueCorpus& corpus, const KnowledgeGraph& kg,
             const RecTrainConfig& train_config, const std::vector<std::string>& train_sessions)
      : model_(model),
        corpus_(corpus),
        kg_(kg),
        config_(train_config),
        collection_(collect_session_hyperedges(corpus, train_sessions)) {
    adam_.lr = train_config.lr;
    train_examples_ = extract_rec_examples(corpus, train_sessions, &skipped_);
    item_index_.clear();
    for (size_t i = 0; i < model.items.size(); ++i) {
      item_index_[model.items[i]] = static_cast<int>(i);
    }
  }

  const std::vector<RecExample>& train_examples() const { return train_examples_; }
  int skipped_examples() const { return skipped_; }
  const HyperedgeCollection& collection() const { return collection_; }

  RecEpochStats train_epoch(Rng& rng) {
    RecEpochStats stats;
    std::vector<size_t> order(train_examples_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    Real loss_sum = 0;
    size_t pos = 0;
    while (pos < order.size()) {
      const size_t end = std::min(order.size(), pos + static_cast<size_t>(config_.batch_size));
      model_.store.zero_grad();
      EncodedKg enc = encode_entities(model_);
      std::vector<Tensor> probs;
      std::vector<int> targets;
      for (size_t k = pos; k < end; ++k) {
        const RecExample& ex = train_examples_[order[k]];
        RecForward fwd = rec_forward(model_, corpus_, kg_, ex, enc, &collection_);
        probs.push_back(fwd.p_rec);
        targets.push_back(item_index_.at(ex.target));
      }
      Tensor loss = rec_loss(probs, targets);
      backward(loss);
      adam_step(model_.store, adam_);
      loss_sum += loss.value() * static_cast<Real>(end - pos);
      stats.examples += static_cast<int>(end - pos);
      pos = end;
    }
    stats.mean_loss = stats.examples > 0 ? loss_sum / stats.examples : Real(0);
    return stats;
  }

  // Full-catalog ranking metrics over the given sessions' examples.
  std::map<int, RankingMetrics> evaluate(const std::vector<std::string>& session_ids,
                                         const std::vector<int>& ks,
                                         bool use_extension_candidates = true) {
    NoGradGuard no_grad;
    std::vector<RecExample> examples = extract_rec_examples(corpus_, session_ids);
    EncodedKg enc = encode_entities(model_);
    std::vector<std::vector<int>> rankings;
    std::vector<int> targets;
    for (const auto& ex : examples) {
      RecForward fwd = rec_forward(model_, corpus_, kg_, ex, enc,
                                   use_extension_candidates ? &collection_ : nullptr);
      std::vector<double> scores(fwd.p_rec.numel());
      for (size_t i = 0; i < scores.size(); ++i) scores[i] = (*fwd.p_rec.data)[i];
      rankings.push_back(ranking_from_scores(scores, model_.items));
      targets.push_back(ex.target);
    }
    return evaluate_ranking(rankings, targets, ks);
  }

  AdamState& adam() { return adam_; }

 private:
  RecModel& model_;
  const DialogueCorpus& corpus_;
  const KnowledgeGraph& kg_;
  RecTrainConfig config_;
  HyperedgeCollection collection_;
  std::vector<RecExample> train_examples_;
  std::map<int, int> item_index_;
  AdamState adam_;
  int skipped_ = 0;
};

}  // namespace mhim
