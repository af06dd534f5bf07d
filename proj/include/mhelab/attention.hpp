#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mhelab/accounting.hpp"
#include "mhelab/attention_variant.hpp"
#include "mhelab/tensor.hpp"

// The attention zoo: every mechanism compared in this project behind one
// interface. Projections carry no biases, so learnable-scalar counts match
// the accounting module exactly: attention_params(variant, n, d) + (n*d)^2.

namespace mhelab {

template <typename T>
struct AttentionLayerParams {
  AttentionVariant variant = AttentionVariant::mha;
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;
  std::size_t model_dim = 1;  // always n_heads * head_dim

  // Per-head entries for MHA/EL-att/MQA/SKV queries; single shared entry for
  // SHA/MQA/MHE keys and values. Unused vectors stay empty per variant.
  std::vector<Tensor<T>> wq, wk, wv;
  std::vector<Tensor<T>> wkv;          // SKV: shared key/value projection per head
  std::vector<Tensor<T>> eq, ek, ev;   // MHE: one d_h head embedding per head
  Tensor<T> wo;                        // output projection, d_m x d_m

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto push_all = [&out](const char* base, const std::vector<Tensor<T>>& ts) {
      for (std::size_t i = 0; i < ts.size(); ++i)
        out.emplace_back(std::string(base) + "." + std::to_string(i), ts[i]);
    };
    push_all("wq", wq);
    push_all("wk", wk);
    push_all("wv", wv);
    push_all("wkv", wkv);
    push_all("eq", eq);
    push_all("ek", ek);
    push_all("ev", ev);
    out.emplace_back("wo", wo);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
  }
};

// Projection matrices and head embeddings ~ Normal(0, 0.02^2), drawn from
// `rng` in named_params order.
template <typename T>
AttentionLayerParams<T> init_attention_params(AttentionVariant variant, std::size_t n_heads,
                                              std::size_t head_dim, std::mt19937_64& rng,
                                              double init_std = 0.02) {
  if (n_heads < 1 || head_dim < 1)
    throw ContractError("attention params need n_heads >= 1 and head_dim >= 1");
  AttentionLayerParams<T> p;
  p.variant = variant;
  p.n_heads = n_heads;
  p.head_dim = head_dim;
  p.model_dim = n_heads * head_dim;
  const std::vector<std::size_t> proj{p.model_dim, head_dim};
  const std::vector<std::size_t> emb{head_dim};
  auto draw = [&](const std::vector<std::size_t>& shape) {
    Tensor<T> t = Tensor<T>::randn(shape, rng, init_std);
    t.set_requires_grad(true);
    return t;
  };
  auto draw_n = [&](std::vector<Tensor<T>>& dst, std::size_t count,
                    const std::vector<std::size_t>& shape) {
    for (std::size_t i = 0; i < count; ++i) dst.push_back(draw(shape));
  };
  switch (variant) {
    case AttentionVariant::mha:
      draw_n(p.wq, n_heads, proj);
      draw_n(p.wk, n_heads, proj);
      draw_n(p.wv, n_heads, proj);
      break;
    case AttentionVariant::sha:
      draw_n(p.wq, 1, proj);
      draw_n(p.wk, 1, proj);
      draw_n(p.wv, 1, proj);
      break;
    case AttentionVariant::el_att:
      draw_n(p.wq, n_heads, proj);
      break;
    case AttentionVariant::mqa:
      draw_n(p.wq, n_heads, proj);
      draw_n(p.wk, 1, proj);
      draw_n(p.wv, 1, proj);
      break;
    case AttentionVariant::skv:
      draw_n(p.wq, n_heads, proj);
      draw_n(p.wkv, n_heads, proj);
      break;
    case AttentionVariant::mhe_add:
    case AttentionVariant::mhe_mul:
      draw_n(p.wq, 1, proj);
      draw_n(p.wk, 1, proj);
      draw_n(p.wv, 1, proj);
      draw_n(p.eq, n_heads, emb);
      draw_n(p.ek, n_heads, emb);
      draw_n(p.ev, n_heads, emb);
      break;
  }
  p.wo = draw({p.model_dim, p.model_dim});
  return p;
}

template <typename T>
AttentionLayerParams<T> init_attention_params(AttentionVariant variant, std::size_t n_heads,
                                              std::size_t head_dim, std::uint64_t seed,
                                              double init_std = 0.02) {
  std::mt19937_64 rng(seed);
  return init_attention_params<T>(variant, n_heads, head_dim, rng, init_std);
}

// SoftMax(Q K^T / sqrt(d_h)) V over one sequence. With `causal`, query t only
// sees keys s <= t.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               bool causal) {
  return sdp_attention(q, k, v, 1, causal);
}

// The psi integration operator: perturbs a projected Q/K/V matrix with one
// head's embedding. MHE-Add: M + e. MHE-Mul: M (e + 1) elementwise; the +1
// keeps entries from collapsing toward zero at initialization.
template <typename T>
Tensor<T> apply_head_embedding(AttentionVariant variant, const Tensor<T>& m, const Tensor<T>& e) {
  if (!is_mhe(variant))
    throw ContractError("apply_head_embedding is defined for MHE variants only");
  if (e.rank() != 1)
    throw DimError("head embedding must be a vector, got " + detail::shape_str(e.shape()));
  if (variant == AttentionVariant::mhe_add) return add(m, e);
  return mul(m, add_scalar(e, T(1)));
}

// Concatenated per-head outputs, before the output projection. X holds
// `batch` sequences stacked row-wise; result is (batch*L) x d_m.
template <typename T>
Tensor<T> attention_heads(const AttentionLayerParams<T>& p, const Tensor<T>& x, bool causal,
                          std::size_t batch = 1) {
  if (x.rank() != 2 || x.shape()[1] != p.model_dim)
    throw DimError("attention input must be rank-2 with " + std::to_string(p.model_dim) +
                   " columns, got " + detail::shape_str(x.shape()));
  const std::size_t n = p.n_heads;
  const std::size_t d = p.head_dim;
  std::vector<Tensor<T>> heads;
  heads.reserve(n);

  switch (p.variant) {
    case AttentionVariant::mha:
      for (std::size_t i = 0; i < n; ++i)
        heads.push_back(sdp_attention(matmul(x, p.wq[i]), matmul(x, p.wk[i]), matmul(x, p.wv[i]),
                                      batch, causal));
      break;
    case AttentionVariant::sha: {
      // One head through the shared projections, replicated to model width.
      Tensor<T> h = sdp_attention(matmul(x, p.wq[0]), matmul(x, p.wk[0]), matmul(x, p.wv[0]),
                                  batch, causal);
      for (std::size_t i = 0; i < n; ++i) heads.push_back(h);
      break;
    }
    case AttentionVariant::el_att:
      // Keys and values are the raw hidden-state slice of each head.
      for (std::size_t i = 0; i < n; ++i) {
        Tensor<T> kv = slice_cols(x, i * d, (i + 1) * d);
        heads.push_back(sdp_attention(matmul(x, p.wq[i]), kv, kv, batch, causal));
      }
      break;
    case AttentionVariant::mqa: {
      Tensor<T> k = matmul(x, p.wk[0]);
      Tensor<T> v = matmul(x, p.wv[0]);
      for (std::size_t i = 0; i < n; ++i)
        heads.push_back(sdp_attention(matmul(x, p.wq[i]), k, v, batch, causal));
      break;
    }
    case AttentionVariant::skv:
      for (std::size_t i = 0; i < n; ++i) {
        Tensor<T> kv = matmul(x, p.wkv[i]);
        heads.push_back(sdp_attention(matmul(x, p.wq[i]), kv, kv, batch, causal));
      }
      break;
    case AttentionVariant::mhe_add:
    case AttentionVariant::mhe_mul: {
      Tensor<T> q = matmul(x, p.wq[0]);
      Tensor<T> k = matmul(x, p.wk[0]);
      Tensor<T> v = matmul(x, p.wv[0]);
      for (std::size_t i = 0; i < n; ++i)
        heads.push_back(sdp_attention(apply_head_embedding(p.variant, q, p.eq[i]),
                                      apply_head_embedding(p.variant, k, p.ek[i]),
                                      apply_head_embedding(p.variant, v, p.ev[i]), batch,
                                      causal));
      break;
    }
  }
  return n == 1 ? heads[0] : concat_cols(heads);
}

template <typename T>
Tensor<T> attention_forward(const AttentionLayerParams<T>& p, const Tensor<T>& x, bool causal,
                            std::size_t batch = 1) {
  return matmul(attention_heads(p, x, causal, batch), p.wo);
}

}  // namespace mhelab
