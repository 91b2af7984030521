#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mhim/config.hpp"
#include "mhim/conversation.hpp"
#include "mhim/corpus.hpp"
#include "mhim/hypergraph.hpp"
#include "mhim/kg.hpp"
#include "mhim/metrics.hpp"
#include "mhim/params.hpp"
#include "mhim/pretrain.hpp"
#include "mhim/recommender.hpp"

namespace mhim {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

namespace cli_detail {

inline void require_readable(const std::string& path, const std::string& what) {
  if (path.empty()) throw ValidationError(what + " path is empty");
  if (!std::filesystem::exists(path)) throw IoError(what + " not found: " + path);
}

inline void ensure_out_dir(const std::string& out) {
  if (out.empty()) throw ValidationError("--out directory is required for this command");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out + ": " + ec.message());
}

inline CheckpointDtype dtype_of(const Config& config) {
  return config.checkpoint_dtype == "f32" ? CheckpointDtype::f32 : CheckpointDtype::f64;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << text;
}

}  // namespace cli_detail

struct LoadedData {
  DialogueCorpus corpus;
  KnowledgeGraph kg;
  Vocabulary vocab;
};

// Every item mention must carry the KG item flag, or ranking targets would
// fall outside the candidate catalog.
inline void validate_item_mentions(const DialogueCorpus& corpus, const KnowledgeGraph& kg) {
  for (const auto& s : corpus.sessions) {
    for (const auto& u : s.utterances) {
      for (int item : u.items) {
        if (!kg.is_item(item)) {
          throw ValidationError("corpus: session " + s.session_id + " mentions entity " +
                                std::to_string(item) + " as an item, but the KG does not flag it");
        }
      }
    }
  }
}

inline LoadedData load_data(const Config& config) {
  cli_detail::require_readable(config.corpus_path, "corpus");
  cli_detail::require_readable(config.kg_path, "kg");
  cli_detail::require_readable(config.items_path, "items");
  cli_detail::require_readable(config.vocab_path, "vocab");
  LoadedData data;
  data.vocab = load_vocab(config.vocab_path);
  data.kg = load_kg(config.kg_path, config.items_path, static_cast<int>(config.n_entities),
                    static_cast<int>(config.n_relations));
  data.corpus = load_corpus(config.corpus_path, static_cast<int>(config.n_entities),
                            data.vocab.size());
  validate_item_mentions(data.corpus, data.kg);
  return data;
}

inline RecConfig rec_config_from(const Config& config) {
  RecConfig rc;
  rc.dim = static_cast<int>(config.d_rec);
  rc.heads = static_cast<int>(config.rec_heads);
  rc.rgcn_layers = static_cast<int>(config.rgcn_layers);
  rc.hconv_layers = static_cast<int>(config.hconv_layers);
  rc.n_hops = static_cast<int>(config.n_hops);
  rc.history_cap = static_cast<int>(config.history_cap);
  rc.use_session = config.use_session;
  rc.use_knowledge = config.use_knowledge;
  rc.use_extension = config.use_extension;
  rc.extension.gamma = config.extension_gamma;
  rc.extension.k_max = static_cast<int>(config.extension_k_max);
  return rc;
}

inline ConvConfig conv_config_from(const Config& config) {
  ConvConfig cc;
  cc.d_model = static_cast<int>(config.d_conv);
  cc.layers = static_cast<int>(config.conv_layers);
  cc.heads = static_cast<int>(config.conv_heads);
  cc.ffn_mult = static_cast<int>(config.ffn_mult);
  cc.beta = config.beta;
  cc.use_user_bias = config.use_user_bias;
  cc.use_copy = config.use_copy;
  cc.d_interest = static_cast<int>(config.d_rec);
  cc.max_positions = static_cast<int>(std::max<int64_t>(
      {config.max_current + 2, config.max_history + 2, config.max_target + 2, 64}));
  return cc;
}

// Extended KG spanned by the relations present in the task-related KG, as the
// pre-training substrate.
inline KgSubset extended_kg_for(const KnowledgeGraph& kg, const DialogueCorpus& corpus) {
  return build_extended_kg(kg, corpus_relation_whitelist(kg, corpus));
}

// The shared critical-node set: RWR visit frequency over the extended KG.
// Deterministic under (config, seed), so pre-training and downstream training
// agree on the embedding-table layout.
inline std::vector<int> critical_nodes_for(const Config& config, const KnowledgeGraph& kg,
                                           const DialogueCorpus& corpus) {
  if (config.critical_budget < 0 ||
      config.critical_budget >= static_cast<int64_t>(kg.entity_count())) {
    std::vector<int> all(static_cast<size_t>(kg.entity_count()));
    for (int e = 0; e < kg.entity_count(); ++e) all[static_cast<size_t>(e)] = e;
    return all;
  }
  KgSubset extended = extended_kg_for(kg, corpus);
  WalkParams walk;
  walk.hops = static_cast<int>(config.walk_hops);
  walk.restart_p = config.restart_p;
  Rng rng = Rng(config.seed).substream("critical");
  return select_critical_nodes(extended.graph, walk, static_cast<int>(config.critical_budget), rng);
}

inline Split split_for(const Config& config, const DialogueCorpus& corpus) {
  return split_by_user(corpus, {config.split_train, config.split_valid, config.split_test},
                       config.seed);
}

inline const std::vector<std::string>& split_sessions(const Split& split,
                                                      const std::string& name) {
  if (name == "train") return split.train;
  if (name == "valid") return split.valid;
  if (name == "test") return split.test;
  throw ValidationError("--split must be train, valid, or test, got '" + name + "'");
}

// Copies every parameter of `dst` from `src` by name; a missing or mismatched
// entry means the checkpoint does not belong to this configuration.
inline void apply_checkpoint(ParameterStore& dst, const ParameterStore& src) {
  for (auto& [name, t] : dst) {
    if (!src.contains(name)) throw ValidationError("checkpoint is missing parameter " + name);
    const Tensor& s = src.get(name);
    if (!s.same_shape(t)) throw ValidationError("checkpoint shape mismatch for " + name);
    *t.data = *s.data;
  }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline int cmd_synth(const Config& config, const std::string& out) {
  cli_detail::ensure_out_dir(out);
  SyntheticParams params;
  params.n_users = static_cast<int>(config.synth_users);
  params.n_items = static_cast<int>(config.synth_items);
  params.n_entities = static_cast<int>(config.synth_entities);
  params.sessions_per_user = static_cast<int>(config.synth_sessions);
  params.n_topics = static_cast<int>(config.synth_topics);
  params.seed = config.seed;
  SyntheticData data = generate_synthetic(params);

  const std::string corpus_path = out + "/corpus.jsonl";
  const std::string kg_path = out + "/kg.jsonl";
  const std::string items_path = out + "/items.txt";
  const std::string vocab_path = out + "/vocab.jsonl";
  save_corpus(data.corpus, corpus_path);
  save_kg(data.kg, kg_path, items_path);
  save_vocab(data.vocab, vocab_path);
  {
    std::ofstream os(out + "/relations.jsonl");
    os << nlohmann::ordered_json{{"id", 0}, {"name", "has_attribute"}}.dump() << "\n";
    os << nlohmann::ordered_json{{"id", 1}, {"name", "related_to"}}.dump() << "\n";
  }

  Config derived = config;
  derived.corpus_path = corpus_path;
  derived.kg_path = kg_path;
  derived.items_path = items_path;
  derived.vocab_path = vocab_path;
  derived.n_entities = params.n_entities;
  derived.n_relations = 2;
  save_config(derived, out + "/synth.config");
  std::cout << "wrote synthetic corpus (" << data.corpus.sessions.size() << " sessions, "
            << data.corpus.user_count() << " users) under " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

inline int cmd_pretrain(const Config& config, const std::string& out) {
  validate_config(config);
  cli_detail::ensure_out_dir(out);
  LoadedData data = load_data(config);

  KgSubset extended = extended_kg_for(data.kg, data.corpus);
  if (extended.entities.empty()) throw ValidationError("pretrain: extended KG is empty");
  KnowledgeGraph enc_kg = add_inverse_relations(extended.graph);
  const std::vector<int> critical = critical_nodes_for(config, data.kg, data.corpus);

  Rng rng = Rng(config.seed).substream("pretrain.init");
  ContrastiveState state = make_contrastive_state(
      enc_kg, static_cast<int>(config.d_rec), critical, rng, config.momentum, config.tau,
      static_cast<size_t>(config.queue_capacity), static_cast<int>(config.rgcn_layers));
  AdamState adam;
  adam.lr = config.pretrain_lr;
  adam.weight_decay = config.pretrain_weight_decay;

  WalkParams walk;
  walk.hops = static_cast<int>(config.walk_hops);
  walk.restart_p = config.restart_p;

  const int epochs = static_cast<int>(config.pretrain_epochs);
  const int warmup_epochs =
      std::max(1, static_cast<int>(std::ceil(config.warmup_frac * epochs)));
  Rng epoch_rng = Rng(config.seed).substream("pretrain.epoch");
  std::ostringstream curve;
  curve << "epoch,loss\n";
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const Real lr_scale =
        std::min<Real>(1.0, static_cast<Real>(epoch + 1) / static_cast<Real>(warmup_epochs));
    const Real loss = pretrain_epoch(enc_kg, extended.entities, state, adam,
                                     static_cast<int>(config.pretrain_batch), walk, epoch_rng,
                                     lr_scale);
    curve << epoch << "," << detail::double_repr(loss) << "\n";
    std::cout << "pretrain epoch " << epoch << " loss " << loss << "\n";
  }
  // Only the query encoder survives pre-training.
  save_checkpoint(state.query.store, out + "/encoder.ckpt", cli_detail::dtype_of(config));
  cli_detail::write_text(out + "/pretrain_loss.csv", curve.str());
  return 0;
}

// ---------------------------------------------------------------------------
// train --task rec
// ---------------------------------------------------------------------------

struct RecRunArtifacts {
  std::map<int, RankingMetrics> final_valid;
  int best_epoch = -1;
};

inline RecRunArtifacts cmd_train_rec(const Config& config, const std::string& out,
                                     const std::string& checkpoint) {
  validate_config(config);
  cli_detail::ensure_out_dir(out);
  LoadedData data = load_data(config);
  Split split = split_for(config, data.corpus);
  const std::vector<int> critical = critical_nodes_for(config, data.kg, data.corpus);

  Rng rng(config.seed);
  RecModel model = make_rec_model(data.kg, data.corpus, rec_config_from(config), critical, rng);
  if (!checkpoint.empty()) {
    cli_detail::require_readable(checkpoint, "checkpoint");
    load_pretrained_encoder(model, load_checkpoint(checkpoint));
  }

  RecTrainConfig tc;
  tc.lr = config.lr;
  tc.batch_size = static_cast<int>(config.batch_size);
  tc.epochs = static_cast<int>(config.epochs);
  RecTrainer trainer(model, data.corpus, data.kg, tc, split.train);

  Rng epoch_rng = Rng(config.seed).substream("rec.epoch");
  std::ostringstream history;
  history << "epoch,train_loss,recall@10,recall@50,mrr@10,mrr@50,ndcg@10,ndcg@50\n";
  RecRunArtifacts artifacts;
  Real best_recall50 = -1;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const RecEpochStats stats = trainer.train_epoch(epoch_rng);
    auto valid = trainer.evaluate(split.valid, {10, 50});
    history << epoch << "," << detail::double_repr(stats.mean_loss) << ","
            << detail::double_repr(valid[10].recall) << "," << detail::double_repr(valid[50].recall)
            << "," << detail::double_repr(valid[10].mrr) << "," << detail::double_repr(valid[50].mrr)
            << "," << detail::double_repr(valid[10].ndcg) << ","
            << detail::double_repr(valid[50].ndcg) << "\n";
    std::cout << "rec epoch " << epoch << " loss " << stats.mean_loss << " valid recall@50 "
              << valid[50].recall << "\n";
    if (valid[50].recall > best_recall50) {
      best_recall50 = valid[50].recall;
      artifacts.best_epoch = epoch;
      save_checkpoint(model.store, out + "/model_rec_best.ckpt", cli_detail::dtype_of(config));
    }
    artifacts.final_valid = std::move(valid);
  }
  save_checkpoint(model.store, out + "/model_rec.ckpt", cli_detail::dtype_of(config));
  cli_detail::write_text(out + "/rec_history.csv", history.str());
  cli_detail::write_text(out + "/metrics_rec.json",
                         ranking_metrics_json(artifacts.final_valid).dump(2) + "\n");
  return artifacts;
}

// ---------------------------------------------------------------------------
// train --task conv
// ---------------------------------------------------------------------------

// Interest state for a dialogue context, computed by the frozen recommender
// path and handed to the generator as constants.
struct InterestState {
  Tensor n_sk;
  Tensor u;
};

inline InterestState interest_for(const RecModel& model, const DialogueCorpus& corpus,
                                  const KnowledgeGraph& kg, const EncodedKg& enc,
                                  const HyperedgeCollection* collection, const std::string& user_id,
                                  const std::string& session_id, int session_order, int turn,
                                  const std::vector<int>& entities, const std::vector<int>& items) {
  InterestState interest;
  if (entities.empty()) return interest;  // generator falls back to a zero user vector
  NoGradGuard no_grad;
  RecExample ex;
  ex.session_id = session_id;
  ex.user_id = user_id;
  ex.session_order = session_order;
  ex.turn = turn;
  ex.target = -1;
  ex.context_entities = entities;
  ex.context_items = items;
  RecForward fwd = rec_forward(model, corpus, kg, ex, enc, collection);
  interest.n_sk = fwd.n_sk;
  interest.u = fwd.u;
  return interest;
}

inline GenContext conv_context_for(const ConvModel& conv, const ConvExample& ex,
                                   const InterestState& interest) {
  return make_gen_context(conv, ex.context_tokens, ex.history_tokens, interest.n_sk, interest.u);
}

struct ConvRunArtifacts {
  Real final_valid_loss = 0;
  nlohmann::ordered_json final_metrics;
};

inline ConvRunArtifacts cmd_train_conv(const Config& config, const std::string& out,
                                       const std::string& checkpoint) {
  validate_config(config);
  cli_detail::ensure_out_dir(out);
  LoadedData data = load_data(config);
  Split split = split_for(config, data.corpus);
  const std::vector<int> critical = critical_nodes_for(config, data.kg, data.corpus);

  Rng rng(config.seed);
  RecModel rec = make_rec_model(data.kg, data.corpus, rec_config_from(config), critical, rng);
  if (!checkpoint.empty()) {
    cli_detail::require_readable(checkpoint, "checkpoint");
    // Accept either a full recommender checkpoint or a pre-trained encoder.
    ParameterStore loaded = load_checkpoint(checkpoint);
    load_pretrained_encoder(rec, loaded);
  }
  HyperedgeCollection collection = collect_session_hyperedges(data.corpus, split.train);

  Rng conv_rng = Rng(config.seed).substream("conv");
  ConvModel conv = make_conv_model(conv_config_from(config), data.vocab.size(),
                                   data.vocab.item_token_ids(), conv_rng);

  ConvExampleLimits limits;
  limits.max_current = static_cast<int>(config.max_current);
  limits.max_history = static_cast<int>(config.max_history);
  limits.max_target = static_cast<int>(config.max_target);
  limits.history_cap = static_cast<int>(config.history_cap);
  std::vector<ConvExample> train_examples = extract_conv_examples(data.corpus, split.train, limits);
  std::vector<ConvExample> valid_examples = extract_conv_examples(data.corpus, split.valid, limits);
  if (train_examples.empty()) throw ValidationError("conv training split has no examples");

  AdamState adam;
  adam.lr = config.lr;

  // The interest path is frozen during conversation training; encode once.
  EncodedKg enc = [&]() {
    NoGradGuard no_grad;
    return encode_entities(rec);
  }();
  auto interest_of = [&](const ConvExample& ex) {
    return interest_for(rec, data.corpus, data.kg, enc, &collection, ex.user_id, ex.session_id,
                        ex.session_order, ex.turn, ex.context_entities, ex.context_items);
  };

  auto valid_loss = [&]() {
    if (valid_examples.empty()) return Real(0);
    NoGradGuard no_grad;
    Real total = 0;
    for (const auto& ex : valid_examples) {
      GenLossItem item{conv_context_for(conv, ex, interest_of(ex)), ex.target_tokens};
      total += gen_loss(conv, {item}).value();
    }
    return total / static_cast<Real>(valid_examples.size());
  };

  Rng epoch_rng = Rng(config.seed).substream("conv.epoch");
  std::ostringstream history;
  history << "epoch,train_loss,valid_loss\n";
  ConvRunArtifacts artifacts;
  Real best_valid = std::numeric_limits<Real>::infinity();
  const int epochs = static_cast<int>(config.conv_epochs);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<size_t> order(train_examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    epoch_rng.shuffle(order);
    Real loss_sum = 0;
    size_t pos = 0;
    while (pos < order.size()) {
      const size_t end = std::min(order.size(), pos + static_cast<size_t>(config.conv_batch));
      conv.store.zero_grad();
      std::vector<GenLossItem> batch;
      for (size_t k = pos; k < end; ++k) {
        const ConvExample& ex = train_examples[order[k]];
        batch.push_back({conv_context_for(conv, ex, interest_of(ex)), ex.target_tokens});
      }
      Tensor loss = gen_loss(conv, batch);
      backward(loss);
      adam_step(conv.store, adam);
      loss_sum += loss.value() * static_cast<Real>(end - pos);
      pos = end;
    }
    const Real train_loss = loss_sum / static_cast<Real>(train_examples.size());
    const Real vloss = valid_loss();
    history << epoch << "," << detail::double_repr(train_loss) << ","
            << detail::double_repr(vloss) << "\n";
    std::cout << "conv epoch " << epoch << " train loss " << train_loss << " valid loss " << vloss
              << "\n";
    artifacts.final_valid_loss = vloss;
    if (vloss < best_valid) {
      best_valid = vloss;
      ParameterStore merged = conv.store.clone();
      for (const auto& [name, t] : rec.store) merged.add(name, t.clone().detach());
      save_checkpoint(merged, out + "/model_conv_best.ckpt", cli_detail::dtype_of(config));
    }
  }

  // Final checkpoint bundles the generator with its frozen interest path.
  ParameterStore merged = conv.store.clone();
  for (const auto& [name, t] : rec.store) merged.add(name, t.clone().detach());
  save_checkpoint(merged, out + "/model_conv.ckpt", cli_detail::dtype_of(config));
  cli_detail::write_text(out + "/conv_history.csv", history.str());

  // Distinct-n of greedy generations over the validation split.
  std::vector<std::vector<int>> responses;
  for (const auto& ex : valid_examples) {
    GenContext ctx = conv_context_for(conv, ex, interest_of(ex));
    responses.push_back(generate(conv, ctx, static_cast<int>(config.max_gen_len)));
  }
  artifacts.final_metrics = distinct_metrics_json(responses);
  artifacts.final_metrics["gen_loss"] = artifacts.final_valid_loss;
  cli_detail::write_text(out + "/metrics_conv.json", artifacts.final_metrics.dump(2) + "\n");
  return artifacts;
}

inline int cmd_train(const Config& config, const std::string& task, const std::string& out,
                     const std::string& checkpoint) {
  if (task == "rec") {
    cmd_train_rec(config, out, checkpoint);
    return 0;
  }
  if (task == "conv") {
    cmd_train_conv(config, out, checkpoint);
    return 0;
  }
  throw ValidationError("--task must be rec or conv, got '" + task + "'");
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json eval_predictions_file(const std::string& path) {
  cli_detail::require_readable(path, "predictions");
  std::ifstream is(path);
  std::vector<std::vector<int>> rankings;
  std::vector<int> targets;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      rankings.push_back(j.at("ranking").get<std::vector<int>>());
      targets.push_back(j.at("target").get<int>());
    } catch (const std::exception& e) {
      throw ValidationError("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ranking_metrics_json(evaluate_ranking(rankings, targets, {10, 50}));
}

inline nlohmann::ordered_json eval_rec(const Config& config, const std::string& checkpoint,
                                       const std::string& split_name) {
  LoadedData data = load_data(config);
  Split split = split_for(config, data.corpus);
  const std::vector<int> critical = critical_nodes_for(config, data.kg, data.corpus);
  Rng rng(config.seed);
  RecModel model = make_rec_model(data.kg, data.corpus, rec_config_from(config), critical, rng);
  cli_detail::require_readable(checkpoint, "checkpoint");
  apply_checkpoint(model.store, load_checkpoint(checkpoint));
  RecTrainConfig tc;
  RecTrainer trainer(model, data.corpus, data.kg, tc, split.train);
  auto metrics = trainer.evaluate(split_sessions(split, split_name), {10, 50});
  return ranking_metrics_json(metrics);
}

inline nlohmann::ordered_json eval_conv(const Config& config, const std::string& checkpoint,
                                        const std::string& split_name) {
  LoadedData data = load_data(config);
  Split split = split_for(config, data.corpus);
  const std::vector<int> critical = critical_nodes_for(config, data.kg, data.corpus);
  Rng rng(config.seed);
  RecModel rec = make_rec_model(data.kg, data.corpus, rec_config_from(config), critical, rng);
  Rng conv_rng = Rng(config.seed).substream("conv");
  ConvModel conv = make_conv_model(conv_config_from(config), data.vocab.size(),
                                   data.vocab.item_token_ids(), conv_rng);
  cli_detail::require_readable(checkpoint, "checkpoint");
  ParameterStore loaded = load_checkpoint(checkpoint);
  apply_checkpoint(conv.store, loaded);
  apply_checkpoint(rec.store, loaded);
  HyperedgeCollection collection = collect_session_hyperedges(data.corpus, split.train);

  ConvExampleLimits limits;
  limits.max_current = static_cast<int>(config.max_current);
  limits.max_history = static_cast<int>(config.max_history);
  limits.max_target = static_cast<int>(config.max_target);
  limits.history_cap = static_cast<int>(config.history_cap);
  std::vector<ConvExample> examples =
      extract_conv_examples(data.corpus, split_sessions(split, split_name), limits);

  NoGradGuard no_grad;
  EncodedKg enc = encode_entities(rec);
  std::vector<std::vector<int>> responses;
  Real loss_sum = 0;
  for (const auto& ex : examples) {
    InterestState interest =
        interest_for(rec, data.corpus, data.kg, enc, &collection, ex.user_id, ex.session_id,
                     ex.session_order, ex.turn, ex.context_entities, ex.context_items);
    GenContext ctx = conv_context_for(conv, ex, interest);
    responses.push_back(generate(conv, ctx, static_cast<int>(config.max_gen_len)));
    loss_sum += gen_loss(conv, {GenLossItem{ctx, ex.target_tokens}}).value();
  }
  auto metrics = distinct_metrics_json(responses);
  metrics["gen_loss"] = examples.empty() ? 0.0 : loss_sum / static_cast<double>(examples.size());
  return metrics;
}

inline int cmd_eval(const Config& config, const std::string& task, const std::string& checkpoint,
                    const std::string& split_name, const std::string& predictions,
                    const std::string& out) {
  validate_config(config);
  nlohmann::ordered_json metrics;
  if (!predictions.empty()) {
    metrics = eval_predictions_file(predictions);
  } else if (task == "rec") {
    metrics = eval_rec(config, checkpoint, split_name);
  } else if (task == "conv") {
    metrics = eval_conv(config, checkpoint, split_name);
  } else {
    throw ValidationError("--task must be rec or conv, got '" + task + "'");
  }
  const std::string text = metrics.dump(2) + "\n";
  std::cout << text;
  if (!out.empty()) {
    cli_detail::ensure_out_dir(out);
    cli_detail::write_text(out + "/metrics_" + (predictions.empty() ? task : "predictions") +
                               "_" + (predictions.empty() ? split_name : "file") + ".json",
                           text);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

inline int cmd_generate(const Config& config, const std::string& checkpoint,
                        const std::string& session_file, const std::string& out) {
  validate_config(config);
  LoadedData data = load_data(config);
  cli_detail::require_readable(session_file, "session file");
  DialogueCorpus sessions = load_corpus(session_file, static_cast<int>(config.n_entities),
                                        data.vocab.size());
  Split split = split_for(config, data.corpus);
  const std::vector<int> critical = critical_nodes_for(config, data.kg, data.corpus);
  Rng rng(config.seed);
  RecModel rec = make_rec_model(data.kg, data.corpus, rec_config_from(config), critical, rng);
  Rng conv_rng = Rng(config.seed).substream("conv");
  ConvModel conv = make_conv_model(conv_config_from(config), data.vocab.size(),
                                   data.vocab.item_token_ids(), conv_rng);
  cli_detail::require_readable(checkpoint, "checkpoint");
  ParameterStore loaded = load_checkpoint(checkpoint);
  apply_checkpoint(conv.store, loaded);
  apply_checkpoint(rec.store, loaded);
  HyperedgeCollection collection = collect_session_hyperedges(data.corpus, split.train);

  ConvExampleLimits limits;
  limits.max_current = static_cast<int>(config.max_current);
  limits.max_history = static_cast<int>(config.max_history);
  limits.max_target = static_cast<int>(config.max_target);
  limits.history_cap = static_cast<int>(config.history_cap);
  std::vector<std::string> ids;
  for (const auto& s : sessions.sessions) ids.push_back(s.session_id);
  std::vector<ConvExample> examples = extract_conv_examples(sessions, ids, limits);

  NoGradGuard no_grad;
  EncodedKg enc = encode_entities(rec);
  std::ostringstream lines;
  for (const auto& ex : examples) {
    InterestState interest =
        interest_for(rec, sessions, data.kg, enc, &collection, ex.user_id, ex.session_id,
                     ex.session_order, ex.turn, ex.context_entities, ex.context_items);
    GenContext ctx = conv_context_for(conv, ex, interest);
    const std::vector<int> tokens = generate(conv, ctx, static_cast<int>(config.max_gen_len));
    std::string text;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (i > 0) text += " ";
      text += data.vocab.tokens[static_cast<size_t>(tokens[i])];
    }
    nlohmann::ordered_json j{
        {"session_id", ex.session_id}, {"turn", ex.turn}, {"tokens", tokens}, {"text", text}};
    lines << j.dump() << "\n";
  }
  if (out.empty()) {
    std::cout << lines.str();
  } else {
    cli_detail::ensure_out_dir(out);
    cli_detail::write_text(out + "/responses.jsonl", lines.str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, char** argv) {
  CLI::App app{"Multi-grained hypergraph interest modeling for conversational recommendation"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out, task = "rec", split = "test", predictions,
              session_file;
  uint64_t seed_override = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "configuration file");
    if (config_required) opt->required();
    sub->add_option("--seed", seed_override, "override the config seed")
        ->each([&](const std::string&) { seed_given = true; });
    sub->add_option("--out", out, "output directory");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic corpus + KG");
  add_common(synth, false);

  CLI::App* pretrain = app.add_subcommand("pretrain", "contrastive KG-encoder pre-training");
  add_common(pretrain, true);

  CLI::App* train = app.add_subcommand("train", "train the recommender or the generator");
  add_common(train, true);
  train->add_option("--task", task, "rec or conv");
  train->add_option("--checkpoint", checkpoint, "initial checkpoint (pre-trained encoder)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, true);
  eval->add_option("--task", task, "rec or conv");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  eval->add_option("--split", split, "train, valid, or test");
  eval->add_option("--predictions", predictions, "score a predictions file instead of a model");

  CLI::App* generate_cmd = app.add_subcommand("generate", "generate responses for a session file");
  add_common(generate_cmd, true);
  generate_cmd->add_option("--checkpoint", checkpoint, "conversation checkpoint")->required();
  generate_cmd->add_option("--session-file", session_file, "JSON-lines session file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    Config config;
    if (!config_path.empty()) config = load_config(config_path);
    if (seed_given) config.seed = seed_override;
    if (synth->parsed()) return cmd_synth(config, out);
    if (pretrain->parsed()) return cmd_pretrain(config, out);
    if (train->parsed()) return cmd_train(config, task, out, checkpoint);
    if (eval->parsed()) return cmd_eval(config, task, checkpoint, split, predictions, out);
    if (generate_cmd->parsed()) return cmd_generate(config, checkpoint, session_file, out);
    return 1;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mhim
