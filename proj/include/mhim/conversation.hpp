#pragma once

#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mhim/corpus.hpp"
#include "mhim/nn.hpp"
#include "mhim/params.hpp"
#include "mhim/recommender.hpp"

namespace mhim {

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ConvConfig {
  int d_model = 300;
  int layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  Real beta = 0.9;  // current/history trade-off, fixed per run
  int max_positions = 2048;
  bool use_user_bias = true;
  bool use_copy = true;
  int d_interest = 128;  // recommender-side dimension before projection
  Real init_std = 0.05;
};

struct EncoderLayerParams {
  MhaParams self;
  LayerNormParams ln_attn, ln_ffn;
  FfnParams ffn;
};

struct DecoderLayerParams {
  MhaParams self, nsk, cur, hist;
  LayerNormParams ln_self, ln_nsk, ln_fuse, ln_ffn;
  FfnParams ffn;
};

// Dual-encoder/decoder generator with user-interest and copy biases. The two
// dialogue encoders share the token embedding but keep separate stacks.
struct ConvModel {
  ConvConfig config;
  ParameterStore store;
  Tensor token_emb;  // V x d
  Tensor positions;  // constant sinusoidal table
  std::vector<EncoderLayerParams> enc_current, enc_history;
  std::vector<DecoderLayerParams> decoder;
  Tensor w_out, b_out;    // vocabulary logits from decoder state
  Tensor w_user, b_user;  // vocabulary bias from the user vector
  Tensor w_copy;          // bilinear copy transform
  Tensor proj_nsk, proj_u;  // d_interest -> d_model adapters
  std::vector<int> item_token_ids;  // ascending vocab ids carrying items
};

namespace detail {

inline EncoderLayerParams register_encoder_layer(ParameterStore& store, const std::string& prefix,
                                                 const ConvConfig& cfg, Rng& rng) {
  EncoderLayerParams p;
  p.self = register_mha_params(store, prefix + ".self", cfg.d_model, rng, cfg.init_std);
  p.ln_attn = register_layer_norm(store, prefix + ".ln_attn", cfg.d_model);
  p.ln_ffn = register_layer_norm(store, prefix + ".ln_ffn", cfg.d_model);
  p.ffn = register_ffn_params(store, prefix + ".ffn", cfg.d_model, cfg.d_model * cfg.ffn_mult,
                              rng, cfg.init_std, Activation::relu);
  return p;
}

inline DecoderLayerParams register_decoder_layer(ParameterStore& store, const std::string& prefix,
                                                 const ConvConfig& cfg, Rng& rng) {
  DecoderLayerParams p;
  p.self = register_mha_params(store, prefix + ".self", cfg.d_model, rng, cfg.init_std);
  p.nsk = register_mha_params(store, prefix + ".nsk", cfg.d_model, rng, cfg.init_std);
  p.cur = register_mha_params(store, prefix + ".cur", cfg.d_model, rng, cfg.init_std);
  p.hist = register_mha_params(store, prefix + ".hist", cfg.d_model, rng, cfg.init_std);
  p.ln_self = register_layer_norm(store, prefix + ".ln_self", cfg.d_model);
  p.ln_nsk = register_layer_norm(store, prefix + ".ln_nsk", cfg.d_model);
  p.ln_fuse = register_layer_norm(store, prefix + ".ln_fuse", cfg.d_model);
  p.ln_ffn = register_layer_norm(store, prefix + ".ln_ffn", cfg.d_model);
  p.ffn = register_ffn_params(store, prefix + ".ffn", cfg.d_model, cfg.d_model * cfg.ffn_mult,
                              rng, cfg.init_std, Activation::relu);
  return p;
}

}  // namespace detail

inline ConvModel make_conv_model(const ConvConfig& config, int vocab_size,
                                 const std::vector<int>& item_token_ids, Rng& rng) {
  if (config.beta < 0 || config.beta > 1) {
    throw std::invalid_argument("make_conv_model: beta outside [0,1]");
  }
  if (config.use_copy && item_token_ids.empty()) {
    throw std::invalid_argument("make_conv_model: copy mechanism needs a nonempty item vocabulary");
  }
  ConvModel model;
  model.config = config;
  model.item_token_ids = item_token_ids;
  std::sort(model.item_token_ids.begin(), model.item_token_ids.end());
  for (int t : model.item_token_ids) {
    if (t < 0 || t >= vocab_size) {
      throw std::out_of_range("make_conv_model: item token outside vocabulary");
    }
  }
  Rng init = rng.substream("conv.init");
  model.token_emb =
      model.store.add("conv.emb", Tensor::randn({vocab_size, config.d_model}, init, config.init_std));
  model.positions = sinusoidal_positions(config.max_positions, config.d_model);
  for (int l = 0; l < config.layers; ++l) {
    model.enc_current.push_back(detail::register_encoder_layer(
        model.store, "conv.enc_cur.l" + std::to_string(l), config, init));
    model.enc_history.push_back(detail::register_encoder_layer(
        model.store, "conv.enc_hist.l" + std::to_string(l), config, init));
    model.decoder.push_back(detail::register_decoder_layer(
        model.store, "conv.dec.l" + std::to_string(l), config, init));
  }
  model.w_out = model.store.add("conv.out.w",
                                Tensor::randn({config.d_model, vocab_size}, init, config.init_std));
  model.b_out = model.store.add("conv.out.b", Tensor::zeros({vocab_size}));
  model.w_user = model.store.add(
      "conv.bias_user.w", Tensor::randn({config.d_model, vocab_size}, init, config.init_std));
  model.b_user = model.store.add("conv.bias_user.b", Tensor::zeros({vocab_size}));
  model.w_copy = model.store.add("conv.copy.w",
                                 Tensor::randn({config.d_model, config.d_model}, init, config.init_std));
  model.proj_nsk = model.store.add(
      "conv.proj.nsk", Tensor::randn({config.d_interest, config.d_model}, init, config.init_std));
  model.proj_u = model.store.add(
      "conv.proj.u", Tensor::randn({config.d_interest, config.d_model}, init, config.init_std));
  return model;
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

inline Tensor embed_tokens(const ConvModel& model, const std::vector<int>& tokens) {
  const int n = static_cast<int>(tokens.size());
  if (n > model.positions.shape[0]) throw std::invalid_argument("embed_tokens: sequence too long");
  Tensor x = gather_rows(model.token_emb, tokens);
  Tensor pos({n, model.config.d_model});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < model.config.d_model; ++j) pos.at(i, j) = model.positions.at(i, j);
  return add(x, pos);
}

// Standard encoder stack: one output row per token. Empty input returns an
// undefined tensor; the decoder treats that branch as absent.
inline Tensor encode_dialogue(const ConvModel& model, const std::vector<EncoderLayerParams>& stack,
                              const std::vector<int>& tokens) {
  if (tokens.empty()) return Tensor{};
  Tensor x = embed_tokens(model, tokens);
  for (const auto& layer : stack) {
    x = layer_norm(add(x, multi_head_attention(x, x, x, model.config.heads, layer.self)),
                   layer.ln_attn);
    x = layer_norm(add(x, feed_forward(x, layer.ffn)), layer.ln_ffn);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Generation context and decoder
// ---------------------------------------------------------------------------

struct GenContext {
  Tensor x_c;   // current-dialogue encoder output (required)
  Tensor x_h;   // historical encoder output; undefined when no history
  Tensor n_sk;  // projected fused interest rows; undefined when unavailable
  Tensor u;     // projected user vector, 1 x d_model
  Real beta = 0.9;
};

// Encodes both dialogues and projects the recommender-side interest state.
// Interest inputs come in at d_interest and are treated as constants.
inline GenContext make_gen_context(const ConvModel& model, const std::vector<int>& current_tokens,
                                   const std::vector<int>& history_tokens, const Tensor& n_sk_interest,
                                   const Tensor& u_interest) {
  if (current_tokens.empty()) {
    throw std::invalid_argument("make_gen_context: current dialogue must be nonempty");
  }
  GenContext ctx;
  ctx.beta = model.config.beta;
  ctx.x_c = encode_dialogue(model, model.enc_current, current_tokens);
  ctx.x_h = encode_dialogue(model, model.enc_history, history_tokens);
  if (n_sk_interest.defined() && n_sk_interest.rows() > 0) {
    ctx.n_sk = matmul(n_sk_interest.detach(), model.proj_nsk);
  }
  if (u_interest.defined()) {
    ctx.u = matmul(u_interest.detach(), model.proj_u);
  } else {
    ctx.u = matmul(Tensor::zeros({1, model.config.d_interest}), model.proj_u);
  }
  return ctx;
}

// One decoder layer: causal self-attention, cross-attention over N_SK, then
// beta-weighted fusion of current- and history-dialogue cross-attention.
// With beta = 1 or no history the history branch is never evaluated, so the
// output is bit-identical to a build without that branch.
inline Tensor decoder_layer(const ConvModel& model, const DecoderLayerParams& layer,
                            const Tensor& r_prev, const GenContext& ctx, const Tensor& mask) {
  const int heads = model.config.heads;
  Tensor a0 = layer_norm(
      add(r_prev, multi_head_attention(r_prev, r_prev, r_prev, heads, layer.self, &mask)),
      layer.ln_self);
  Tensor a1 = a0;
  if (ctx.n_sk.defined() && ctx.n_sk.rows() > 0) {
    a1 = layer_norm(add(a0, multi_head_attention(a0, ctx.n_sk, ctx.n_sk, heads, layer.nsk)),
                    layer.ln_nsk);
  }
  Tensor a2 = multi_head_attention(a1, ctx.x_c, ctx.x_c, heads, layer.cur);
  Tensor fused;
  const bool history_active = ctx.x_h.defined() && ctx.x_h.rows() > 0 && ctx.beta < Real(1);
  if (history_active) {
    Tensor a3 = multi_head_attention(a1, ctx.x_h, ctx.x_h, heads, layer.hist);
    fused = add(scale(a2, ctx.beta), scale(a3, Real(1) - ctx.beta));
  } else {
    fused = a2;
  }
  Tensor a4 = layer_norm(add(a1, fused), layer.ln_fuse);
  return layer_norm(add(a4, feed_forward(a4, layer.ffn)), layer.ln_ffn);
}

// Runs the decoder stack over the (teacher-forced or generated-so-far) input
// tokens under a causal mask; returns the top-layer states, one row per
// position.
inline Tensor decode(const ConvModel& model, const std::vector<int>& input_tokens,
                     const GenContext& ctx) {
  if (input_tokens.empty()) throw std::invalid_argument("decode: empty input");
  Tensor mask = causal_mask(static_cast<int>(input_tokens.size()));
  Tensor r = embed_tokens(model, input_tokens);
  for (const auto& layer : model.decoder) r = decoder_layer(model, layer, r, ctx, mask);
  return r;
}

// ---------------------------------------------------------------------------
// Output distribution: vocabulary logits + user bias + masked copy scores
// ---------------------------------------------------------------------------

// Combined next-token logits for each decoder state row. The copy term
// contributes only on item-vocabulary tokens; every other token's logit is
// exactly the biased vocabulary logit.
inline Tensor output_logits(const ConvModel& model, const Tensor& decoder_states,
                            const GenContext& ctx) {
  Tensor logits = add_rowvec(matmul(decoder_states, model.w_out), model.b_out);
  if (model.config.use_user_bias) {
    Tensor user_bias = add_rowvec(matmul(ctx.u, model.w_user), model.b_user);
    logits = add_rowvec(logits, user_bias);
  }
  if (model.config.use_copy) {
    if (model.item_token_ids.empty()) {
      throw std::logic_error("output_logits: copy enabled with empty item vocabulary");
    }
    // Bilinear copy score routed through each item token's embedding:
    // z = (R W_copy) * u elementwise, score(tok) = z . emb(tok).
    Tensor z = mul_rowvec(matmul(decoder_states, model.w_copy), ctx.u);
    Tensor item_emb = gather_rows(model.token_emb, model.item_token_ids);
    Tensor item_scores = matmul(z, transpose2d(item_emb));
    // Scatter item-token scores into vocabulary width via a constant 0/1 map.
    Tensor scatter({static_cast<int>(model.item_token_ids.size()), model.token_emb.shape[0]});
    for (size_t i = 0; i < model.item_token_ids.size(); ++i) {
      scatter.at(static_cast<int>(i), model.item_token_ids[i]) = 1;
    }
    logits = add(logits, matmul(item_scores, scatter));
  }
  return logits;
}

// Next-token distribution for a single decoder state row.
inline Tensor generate_step(const ConvModel& model, const Tensor& decoder_state,
                            const GenContext& ctx) {
  return softmax(output_logits(model, decoder_state, ctx), 1);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct GenLossItem {
  GenContext ctx;
  std::vector<int> target_tokens;  // y_1..y_T, ends with the end token
};

// Teacher-forced negative log-likelihood: -sum_t log P(y_t | y_<t), summed to
// the truncated length and averaged over the batch.
inline Tensor gen_loss(const ConvModel& model, const std::vector<GenLossItem>& batch) {
  if (batch.empty()) throw std::invalid_argument("gen_loss: empty batch");
  Tensor total;
  for (size_t b = 0; b < batch.size(); ++b) {
    const auto& item = batch[b];
    if (item.target_tokens.empty()) throw std::invalid_argument("gen_loss: empty target");
    std::vector<int> input = {kBosToken};
    input.insert(input.end(), item.target_tokens.begin(), item.target_tokens.end() - 1);
    Tensor states = decode(model, input, item.ctx);
    Tensor logp = log_softmax(output_logits(model, states, item.ctx), 1);
    Tensor example_sum;
    const int vocab = logp.shape[1];
    for (size_t t = 0; t < item.target_tokens.size(); ++t) {
      const int y = item.target_tokens[t];
      if (y < 0 || y >= vocab) throw std::out_of_range("gen_loss: target token out of range");
      Tensor nll = scale(pick(logp, static_cast<int>(t) * vocab + y), Real(-1));
      example_sum = t == 0 ? nll : add(example_sum, nll);
    }
    total = b == 0 ? example_sum : add(total, example_sum);
  }
  return scale(total, Real(1) / static_cast<Real>(batch.size()));
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

enum class DecodeMode { greedy, top_k };

// Greedy (default) or top-k sampled decoding; stops at the end token or
// max_len. Greedy ties resolve toward the lower token id.
inline std::vector<int> generate(const ConvModel& model, const GenContext& ctx, int max_len,
                                 DecodeMode mode = DecodeMode::greedy, int top_k = 5,
                                 Rng* rng = nullptr) {
  NoGradGuard no_grad;
  std::vector<int> out;
  std::vector<int> input = {kBosToken};
  for (int step = 0; step < max_len; ++step) {
    Tensor states = decode(model, input, ctx);
    Tensor last = slice_rows(states, static_cast<int>(input.size()) - 1, 1);
    Tensor dist = generate_step(model, last, ctx);
    int next = 0;
    if (mode == DecodeMode::greedy) {
      Real best = -1;
      for (int v = 0; v < dist.cols(); ++v) {
        if (dist.at(0, v) > best) {
          best = dist.at(0, v);
          next = v;
        }
      }
    } else {
      if (!rng) throw std::invalid_argument("generate: top-k sampling needs an RNG");
      std::vector<int> ids(static_cast<size_t>(dist.cols()));
      for (int v = 0; v < dist.cols(); ++v) ids[static_cast<size_t>(v)] = v;
      std::partial_sort(ids.begin(), ids.begin() + std::min<size_t>(ids.size(), static_cast<size_t>(top_k)),
                        ids.end(), [&](int a, int b) {
                          if (dist.at(0, a) != dist.at(0, b)) return dist.at(0, a) > dist.at(0, b);
                          return a < b;
                        });
      const size_t k = std::min<size_t>(ids.size(), static_cast<size_t>(top_k));
      Real mass = 0;
      for (size_t i = 0; i < k; ++i) mass += dist.at(0, ids[i]);
      Real draw = rng->uniform() * mass;
      next = ids[k - 1];
      for (size_t i = 0; i < k; ++i) {
        draw -= dist.at(0, ids[i]);
        if (draw <= 0) {
          next = ids[i];
          break;
        }
      }
    }
    if (next == kEosToken) break;
    out.push_back(next);
    input.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conversation examples
// ---------------------------------------------------------------------------

// One example per system turn: generate the reply from the dialogue so far.
struct ConvExample {
  std::string session_id;
  std::string user_id;
  int session_order = 0;
  int turn = 0;
  std::vector<int> context_tokens;   // BOS + truncated current-session context
  std::vector<int> history_tokens;   // truncated historical concatenation
  std::vector<int> target_tokens;    // reply tokens, EOS-terminated, truncated
  std::vector<int> context_entities;
  std::vector<int> context_items;
};

struct ConvExampleLimits {
  int max_current = 256;
  int max_history = 1024;
  int max_target = 40;
  int history_cap = 10;
};

inline std::vector<ConvExample> extract_conv_examples(const DialogueCorpus& corpus,
                                                      const std::vector<std::string>& session_ids,
                                                      const ConvExampleLimits& limits) {
  std::set<std::string> wanted(session_ids.begin(), session_ids.end());
  std::vector<ConvExample> out;
  for (const auto& s : corpus.sessions) {
    if (!wanted.count(s.session_id)) continue;
    UserHistory history = user_history(corpus, s.user_id, s.order, limits.history_cap);
    std::vector<int> entities, items;
    std::unordered_set<int> eseen, iseen;
    for (size_t turn = 0; turn < s.utterances.size(); ++turn) {
      const Utterance& u = s.utterances[turn];
      if (u.speaker == Speaker::system && turn > 0) {
        ConvExample ex;
        ex.session_id = s.session_id;
        ex.user_id = s.user_id;
        ex.session_order = s.order;
        ex.turn = static_cast<int>(turn);
        ContextTokens ctx = truncate_context(s, history, limits.max_current, limits.max_history,
                                             static_cast<int>(turn));
        ex.context_tokens = {kBosToken};
        ex.context_tokens.insert(ex.context_tokens.end(), ctx.current.begin(), ctx.current.end());
        ex.history_tokens = ctx.history;
        ex.target_tokens = u.tokens;
        if (ex.target_tokens.empty() || ex.target_tokens.back() != kEosToken) {
          ex.target_tokens.push_back(kEosToken);
        }
        if (static_cast<int>(ex.target_tokens.size()) > limits.max_target) {
          ex.target_tokens.resize(static_cast<size_t>(limits.max_target));
          ex.target_tokens.back() = kEosToken;
        }
        ex.context_entities = entities;
        ex.context_items = items;
        out.push_back(std::move(ex));
      }
      for (int e : u.entities) {
        if (eseen.insert(e).second) entities.push_back(e);
      }
      for (int it : u.items) {
        if (iseen.insert(it).second) items.push_back(it);
      }
    }
  }
  return out;
}

}  // namespace mhim
