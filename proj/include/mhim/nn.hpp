#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mhim/params.hpp"
#include "mhim/tensor.hpp"

namespace mhim {

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

struct MhaParams {
  Tensor wq, wk, wv, wo;  // each d x d
};

inline MhaParams register_mha_params(ParameterStore& store, const std::string& prefix, int d,
                                     Rng& rng, Real stddev) {
  MhaParams p;
  p.wq = store.add(prefix + ".wq", Tensor::randn({d, d}, rng, stddev));
  p.wk = store.add(prefix + ".wk", Tensor::randn({d, d}, rng, stddev));
  p.wv = store.add(prefix + ".wv", Tensor::randn({d, d}, rng, stddev));
  p.wo = store.add(prefix + ".wo", Tensor::randn({d, d}, rng, stddev));
  return p;
}

inline MhaParams load_mha_params(ParameterStore& store, const std::string& prefix) {
  return MhaParams{store.get(prefix + ".wq"), store.get(prefix + ".wk"), store.get(prefix + ".wv"),
                   store.get(prefix + ".wo")};
}

inline MhaParams identity_mha_params(int d) {
  return MhaParams{Tensor::identity(d), Tensor::identity(d), Tensor::identity(d),
                   Tensor::identity(d)};
}

// Additive attention mask: 0 where allowed, large negative where disallowed.
inline Tensor causal_mask(int n) {
  Tensor m({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = Real(-1e30);
  return m;
}

// Scaled-dot-product multi-head attention over row-major matrices:
// Q is q x d, K and V are k x d, output is q x d. `mask`, when given, is a
// q x k additive-logit matrix shared across heads.
inline Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                                   int heads, const MhaParams& params,
                                   const Tensor* mask = nullptr) {
  if (!key.defined() || !value.defined() || key.rows() == 0) {
    throw std::invalid_argument("multi_head_attention: empty keys");
  }
  detail::require_2d(query, "multi_head_attention");
  detail::require_2d(key, "multi_head_attention");
  detail::require_2d(value, "multi_head_attention");
  const int d = query.shape[1];
  if (key.shape[1] != d || value.shape[1] != d) {
    throw std::invalid_argument("multi_head_attention: dim mismatch across Q/K/V");
  }
  if (key.shape[0] != value.shape[0]) {
    throw std::invalid_argument("multi_head_attention: key/value row mismatch");
  }
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("multi_head_attention: dim not divisible by heads");
  }
  if (mask && (mask->shape[0] != query.shape[0] || mask->shape[1] != key.shape[0])) {
    throw std::invalid_argument("multi_head_attention: mask shape mismatch");
  }
  const int dh = d / heads;
  const Real scale_factor = Real(1) / std::sqrt(static_cast<Real>(dh));

  Tensor qp = matmul(query, params.wq);
  Tensor kp = matmul(key, params.wk);
  Tensor vp = matmul(value, params.wv);

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(qp, h * dh, dh);
    Tensor kh = slice_cols(kp, h * dh, dh);
    Tensor vh = slice_cols(vp, h * dh, dh);
    Tensor logits = scale(matmul(qh, transpose2d(kh)), scale_factor);
    if (mask) logits = add(logits, *mask);
    Tensor attn = softmax(logits, 1);
    head_outputs.push_back(matmul(attn, vh));
  }
  Tensor merged = heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return matmul(merged, params.wo);
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

enum class Activation { identity, relu };

struct FfnParams {
  Tensor w1, b1, w2, b2;
  Activation activation = Activation::relu;
};

inline FfnParams register_ffn_params(ParameterStore& store, const std::string& prefix, int d,
                                     int hidden, Rng& rng, Real stddev,
                                     Activation act = Activation::relu) {
  FfnParams p;
  p.w1 = store.add(prefix + ".w1", Tensor::randn({d, hidden}, rng, stddev));
  p.b1 = store.add(prefix + ".b1", Tensor::zeros({hidden}));
  p.w2 = store.add(prefix + ".w2", Tensor::randn({hidden, d}, rng, stddev));
  p.b2 = store.add(prefix + ".b2", Tensor::zeros({d}));
  p.activation = act;
  return p;
}

inline FfnParams load_ffn_params(ParameterStore& store, const std::string& prefix,
                                 Activation act = Activation::relu) {
  return FfnParams{store.get(prefix + ".w1"), store.get(prefix + ".b1"),
                   store.get(prefix + ".w2"), store.get(prefix + ".b2"), act};
}

// Two affine maps with one nonlinearity between.
inline Tensor feed_forward(const Tensor& x, const FfnParams& params) {
  Tensor h = add_rowvec(matmul(x, params.w1), params.b1);
  if (params.activation == Activation::relu) h = relu(h);
  return add_rowvec(matmul(h, params.w2), params.b2);
}

// ---------------------------------------------------------------------------
// Layer norm parameters and positional encoding
// ---------------------------------------------------------------------------

struct LayerNormParams {
  Tensor gamma, beta;
};

inline LayerNormParams register_layer_norm(ParameterStore& store, const std::string& prefix,
                                           int d) {
  LayerNormParams p;
  p.gamma = store.add(prefix + ".gamma", Tensor::full({d}, Real(1)));
  p.beta = store.add(prefix + ".beta", Tensor::zeros({d}));
  return p;
}

inline LayerNormParams load_layer_norm(ParameterStore& store, const std::string& prefix) {
  return LayerNormParams{store.get(prefix + ".gamma"), store.get(prefix + ".beta")};
}

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm(x, p.gamma, p.beta);
}

// Sinusoidal position table, n x d.
inline Tensor sinusoidal_positions(int n, int d) {
  Tensor pe({n, d});
  for (int pos = 0; pos < n; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const Real angle = pos / std::pow(Real(10000), static_cast<Real>(i) / d);
      pe.at(pos, i) = std::sin(angle);
      if (i + 1 < d) pe.at(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace mhim
