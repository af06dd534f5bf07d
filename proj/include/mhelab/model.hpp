#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mhelab/attention.hpp"
#include "mhelab/tensor.hpp"

// Tiny pre-norm transformers assembled from the attention zoo, with AdamW
// training, masked/causal LM objectives and strided perplexity evaluation.

namespace mhelab {

enum class Arch { encoder_only, decoder_only };

Arch parse_arch(const std::string& name);
const char* arch_name(Arch a);

struct ModelConfig {
  Arch arch = Arch::decoder_only;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t head_dim = 8;
  std::size_t model_dim = 0;  // filled to n_heads*head_dim by normalized()
  std::size_t ffn_dim = 0;    // filled to 4*model_dim by normalized()
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  AttentionVariant variant = AttentionVariant::mha;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  ModelConfig normalized() const {
    ModelConfig c = *this;
    if (c.model_dim == 0) c.model_dim = c.n_heads * c.head_dim;
    if (c.ffn_dim == 0) c.ffn_dim = 4 * c.model_dim;
    return c;
  }

  void validate() const {
    const ModelConfig c = normalized();
    if (c.n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (c.n_heads < 1 || c.head_dim < 1) throw ConfigError("n_heads and head_dim must be >= 1");
    if (c.model_dim != c.n_heads * c.head_dim)
      throw ConfigError("model_dim " + std::to_string(c.model_dim) + " != n_heads*head_dim " +
                        std::to_string(c.n_heads * c.head_dim));
    if (c.vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (c.max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (c.dropout < 0 || c.dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct TransformerBlock {
  LayerNormParams<T> ln1;
  AttentionLayerParams<T> attn;
  LayerNormParams<T> ln2;
  Tensor<T> w1, b1, w2, b2;  // d_m -> ffn -> d_m, GELU between
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg.normalized()) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    // Embeddings and FFN weights use fan-in scaling; attention projections
    // keep their own Normal(0, 0.02^2) initialization inside the zoo.
    auto draw = [&](std::vector<std::size_t> shape, double stddev) {
      Tensor<T> t = Tensor<T>::randn(std::move(shape), rng, stddev);
      t.set_requires_grad(true);
      return t;
    };
    auto make_ln = [&] {
      LayerNormParams<T> ln{Tensor<T>::full({cfg_.model_dim}, T(1)),
                            Tensor<T>::zeros({cfg_.model_dim})};
      ln.gain.set_requires_grad(true);
      ln.bias.set_requires_grad(true);
      return ln;
    };
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg_.model_dim));
    // The head is tied to tok_emb, so its scale sets the initial logit
    // spread; a quarter of fan-in keeps the start distribution near uniform.
    tok_emb = draw({cfg_.vocab_size, cfg_.model_dim}, 0.25 * emb_std);
    pos_emb = draw({cfg_.max_seq_len, cfg_.model_dim}, emb_std);
    blocks.reserve(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      TransformerBlock<T> b;
      b.ln1 = make_ln();
      b.attn = init_attention_params<T>(cfg_.variant, cfg_.n_heads, cfg_.head_dim, rng);
      b.ln2 = make_ln();
      b.w1 = draw({cfg_.model_dim, cfg_.ffn_dim}, emb_std);
      b.b1 = Tensor<T>::zeros({cfg_.ffn_dim});
      b.b1.set_requires_grad(true);
      b.w2 = draw({cfg_.ffn_dim, cfg_.model_dim},
                  1.0 / std::sqrt(static_cast<double>(cfg_.ffn_dim)));
      b.b2 = Tensor<T>::zeros({cfg_.model_dim});
      b.b2.set_requires_grad(true);
      blocks.push_back(std::move(b));
    }
    final_ln = make_ln();
  }

  const ModelConfig& config() const { return cfg_; }
  bool causal() const { return cfg_.arch == Arch::decoder_only; }

  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      const std::string base = "blocks." + std::to_string(l) + ".";
      out.emplace_back(base + "ln1.gain", b.ln1.gain);
      out.emplace_back(base + "ln1.bias", b.ln1.bias);
      for (auto& [name, t] : b.attn.named_params()) out.emplace_back(base + "attn." + name, t);
      out.emplace_back(base + "ln2.gain", b.ln2.gain);
      out.emplace_back(base + "ln2.bias", b.ln2.bias);
      out.emplace_back(base + "ffn.w1", b.w1);
      out.emplace_back(base + "ffn.b1", b.b1);
      out.emplace_back(base + "ffn.w2", b.w2);
      out.emplace_back(base + "ffn.b2", b.b2);
    }
    out.emplace_back("final_ln.gain", final_ln.gain);
    out.emplace_back("final_ln.bias", final_ln.bias);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  // Sum over layers of the QKV scalars (accounting's table4 convention).
  std::size_t attention_qkv_params() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.attn.param_count() - b.attn.wo.numel();
    return n;
  }

  // tokens holds `batch` sequences of equal length stacked back to back.
  Tensor<T> hidden(const std::vector<std::int32_t>& tokens, std::size_t batch,
                   std::mt19937_64* dropout_rng = nullptr) const {
    if (batch == 0 || tokens.size() % batch != 0)
      throw ContractError("token count " + std::to_string(tokens.size()) +
                          " not divisible into " + std::to_string(batch) + " sequences");
    const std::size_t L = tokens.size() / batch;
    if (L < 1 || L > cfg_.max_seq_len)
      throw ContractError("sequence length " + std::to_string(L) + " outside [1, " +
                          std::to_string(cfg_.max_seq_len) + "]");
    std::vector<std::int32_t> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i)
      positions[i] = static_cast<std::int32_t>(i % L);

    const bool use_dropout = cfg_.dropout > 0 && dropout_rng != nullptr;
    auto drop = [&](Tensor<T> t) {
      return use_dropout ? dropout(t, cfg_.dropout, *dropout_rng) : t;
    };

    Tensor<T> x = drop(add(embedding(tok_emb, tokens), embedding(pos_emb, positions)));
    for (const auto& b : blocks) {
      Tensor<T> h = layernorm_rows(x, b.ln1.gain, b.ln1.bias);
      x = add(x, drop(attention_forward(b.attn, h, causal(), batch)));
      Tensor<T> h2 = layernorm_rows(x, b.ln2.gain, b.ln2.bias);
      Tensor<T> f = gelu(add(matmul(h2, b.w1), b.b1));
      x = add(x, drop(add(matmul(f, b.w2), b.b2)));
    }
    return layernorm_rows(x, final_ln.gain, final_ln.bias);
  }

  // Tied LM head: logits = hidden * tok_emb^T.
  Tensor<T> logits(const std::vector<std::int32_t>& tokens, std::size_t batch,
                   std::mt19937_64* dropout_rng = nullptr) const {
    return matmul(hidden(tokens, batch, dropout_rng), tok_emb, false, true);
  }

  Tensor<T> tok_emb, pos_emb;
  std::vector<TransformerBlock<T>> blocks;
  LayerNormParams<T> final_ln;

 private:
  ModelConfig cfg_;
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

template <typename U, typename T>
Model<U> convert_model(const Model<T>& src) {
  Model<U> dst(src.config());
  auto sp = src.parameters();
  auto dp = dst.parameters();
  for (std::size_t i = 0; i < sp.size(); ++i)
    for (std::size_t j = 0; j < sp[i].second.numel(); ++j)
      dp[i].second.mut(j) = static_cast<U>(sp[i].second.at(j));
  return dst;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

enum class LrSchedule { linear, constant };
enum class Objective { mlm, clm };

LrSchedule parse_schedule(const std::string& name);
Objective parse_objective(const std::string& name);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 0;
  LrSchedule schedule = LrSchedule::linear;
  Objective objective = Objective::clm;
  double mlm_mask_prob = 0.15;
  std::size_t log_every = 100;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1))
      throw ConfigError("adam betas must lie in (0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (mlm_mask_prob <= 0 || mlm_mask_prob > 1)
      throw ConfigError("mlm_mask_prob must be in (0, 1]");
  }
};

// Peak-lr warmup then linear decay to zero (or flat for `constant`);
// `step` is 0-based.
inline double lr_at(const TrainConfig& tc, std::size_t step) {
  if (tc.warmup_steps > 0 && step < tc.warmup_steps)
    return tc.lr * static_cast<double>(step + 1) / static_cast<double>(tc.warmup_steps);
  if (tc.schedule == LrSchedule::constant) return tc.lr;
  if (tc.steps <= tc.warmup_steps) return tc.lr;
  const double remaining = static_cast<double>(tc.steps - step);
  const double span = static_cast<double>(tc.steps - tc.warmup_steps);
  return tc.lr * std::max(0.0, remaining / span);
}

// One decoupled-weight-decay Adam update on a single tensor.
// `step` is 1-based for the bias correction.
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                std::size_t step, double lr, double beta1, double beta2, double eps,
                double weight_decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw DimError("adamw_step: state sizes (" + std::to_string(grad.size()) + ", " +
                   std::to_string(m.size()) + ", " + std::to_string(v.size()) +
                   ") do not match parameter size " + std::to_string(param.size()));
  if (step < 1) throw ContractError("adamw_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  kern::adamw<T>(param.data(), grad.data(), m.data(), v.data(), param.size(), static_cast<T>(lr),
                 static_cast<T>(beta1), static_cast<T>(beta2), static_cast<T>(eps),
                 static_cast<T>(weight_decay), static_cast<T>(1.0 / bc1),
                 static_cast<T>(1.0 / bc2));
}

template <typename T>
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor<T>> params) : params_(std::move(params)) {
    for (auto& p : params_) {
      if (!p.requires_grad()) throw ContractError("AdamW: parameter does not track gradients");
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step(std::size_t t, double lr, const TrainConfig& tc) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      adamw_step<T>(params_[i].values(), params_[i].grad(), m_[i], v_[i], t, lr, tc.adam_beta1,
                    tc.adam_beta2, tc.adam_eps, tc.weight_decay);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      s += static_cast<double>(kern::sumsq<T>(p.grad().data(), p.grad().size()));
    return std::sqrt(s);
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Data sources
// ---------------------------------------------------------------------------

struct SampleBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;       // batch * seq_len
  std::vector<std::uint8_t> score_mask;   // 1 where the TOKEN itself is scoreable
};

class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual SampleBatch next_batch(std::size_t batch, std::size_t seq_len) = 0;
};

// Canonical synthetic task: each sequence is a uniformly random prefix
// followed by the same prefix again; only the repeated half is scored, so a
// model must route information across positions to do better than chance.
class CopyTaskSource final : public DataSource {
 public:
  CopyTaskSource(std::int32_t vocab, std::size_t prefix_len, std::uint64_t seed)
      : vocab_(vocab), prefix_len_(prefix_len), rng_(seed) {
    if (vocab < 2) throw ContractError("copy task needs vocab >= 2");
    if (prefix_len < 1) throw ContractError("copy task needs prefix_len >= 1");
  }

  SampleBatch next_batch(std::size_t batch, std::size_t seq_len) override {
    if (seq_len != 2 * prefix_len_)
      throw ContractError("copy task: seq_len must equal 2*prefix_len = " +
                          std::to_string(2 * prefix_len_));
    SampleBatch b;
    b.batch = batch;
    b.seq_len = seq_len;
    b.tokens.resize(batch * seq_len);
    b.score_mask.assign(batch * seq_len, 0);
    std::uniform_int_distribution<std::int32_t> dist(0, vocab_ - 1);
    for (std::size_t s = 0; s < batch; ++s) {
      for (std::size_t i = 0; i < prefix_len_; ++i) {
        const std::int32_t tok = dist(rng_);
        b.tokens[s * seq_len + i] = tok;
        b.tokens[s * seq_len + prefix_len_ + i] = tok;
        b.score_mask[s * seq_len + prefix_len_ + i] = 1;
      }
    }
    return b;
  }

 private:
  std::int32_t vocab_;
  std::size_t prefix_len_;
  std::mt19937_64 rng_;
};

// Sequential fixed-length chunks over a token stream, cycling when short.
class TokenStreamSource final : public DataSource {
 public:
  explicit TokenStreamSource(std::vector<std::int32_t> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw ContractError("token stream is empty");
  }

  SampleBatch next_batch(std::size_t batch, std::size_t seq_len) override {
    SampleBatch b;
    b.batch = batch;
    b.seq_len = seq_len;
    b.tokens.resize(batch * seq_len);
    b.score_mask.assign(batch * seq_len, 1);
    for (auto& t : b.tokens) {
      t = tokens_[cursor_];
      cursor_ = (cursor_ + 1) % tokens_.size();
    }
    return b;
  }

 private:
  std::vector<std::int32_t> tokens_;
  std::size_t cursor_ = 0;
};

// Byte-level tokenization: ids 0..255 are raw bytes, then four specials.
inline constexpr std::int32_t kByteVocab = 260;
inline constexpr std::int32_t kBytePad = 256;
inline constexpr std::int32_t kByteBos = 257;
inline constexpr std::int32_t kByteEos = 258;
inline constexpr std::int32_t kByteMask = 259;

std::vector<std::int32_t> bytes_to_tokens(const std::string& data);
std::vector<std::int32_t> load_byte_tokens(const std::string& path);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainReport {
  std::vector<std::pair<std::size_t, double>> loss_curve;  // (1-based step, loss)
  double final_loss = 0.0;  // mean over the last <= 100 recorded steps
  std::int64_t tokens_seen = 0;
  double wall_seconds = 0.0;
};

using StepCallback = std::function<void(std::size_t step, double loss, double lr)>;

template <typename T>
TrainReport train(Model<T>& model, DataSource& data, const TrainConfig& tc,
                  const StepCallback& on_log = {}) {
  tc.validate();
  const ModelConfig& cfg = model.config();
  if (tc.objective == Objective::clm && cfg.arch != Arch::decoder_only)
    throw ContractError("causal LM objective needs a decoder_only model");
  if (tc.objective == Objective::mlm && cfg.arch != Arch::encoder_only)
    throw ContractError("masked LM objective needs an encoder_only model");

  TrainReport report;
  if (tc.steps == 0) return report;

  std::vector<Tensor<T>> tensors;
  for (auto& [name, t] : model.parameters()) tensors.push_back(t);
  AdamW<T> opt(std::move(tensors));
  std::mt19937_64 aux_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  const std::int32_t mask_id = static_cast<std::int32_t>(cfg.vocab_size) - 1;

  const auto t0 = std::chrono::steady_clock::now();
  double last_grad_norm = 0.0;
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    SampleBatch batch = data.next_batch(tc.batch_size, cfg.max_seq_len);
    const std::size_t L = batch.seq_len;
    const std::size_t n = batch.tokens.size();

    std::vector<std::int32_t> inputs = batch.tokens;
    std::vector<std::int32_t> targets(n, 0);
    std::vector<T> weights(n, T(0));
    if (tc.objective == Objective::clm) {
      for (std::size_t i = 0; i < n; ++i) {
        if ((i + 1) % L == 0) continue;  // last position of each sequence
        targets[i] = batch.tokens[i + 1];
        weights[i] = batch.score_mask[i + 1] ? T(1) : T(0);
      }
    } else {
      // 80/10/10 masked-LM corruption; only selected positions are scored.
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::uniform_int_distribution<std::int32_t> rand_tok(
          0, static_cast<std::int32_t>(cfg.vocab_size) - 1);
      std::size_t selected = 0;
      for (std::size_t i = 0; i < n; ++i) {
        targets[i] = batch.tokens[i];
        if (!batch.score_mask[i] || u(aux_rng) >= tc.mlm_mask_prob) continue;
        weights[i] = T(1);
        ++selected;
        const double roll = u(aux_rng);
        if (roll < 0.8)
          inputs[i] = mask_id;
        else if (roll < 0.9)
          inputs[i] = rand_tok(aux_rng);
      }
      if (selected == 0) {  // degenerate draw; force one position
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(aux_rng);
        weights[i] = T(1);
        inputs[i] = mask_id;
      }
    }

    const double lr = lr_at(tc, step - 1);
    opt.zero_grad();
    double loss_value;
    try {
      GradTape<T> tape;
      Tensor<T> logits = model.logits(inputs, tc.batch_size, &aux_rng);
      Tensor<T> loss = cross_entropy_rows(logits, targets, weights);
      loss_value = static_cast<double>(loss.at(0));
      if (!std::isfinite(loss_value))
        throw DivergedError("non-finite loss at step " + std::to_string(step) +
                            " (lr=" + std::to_string(lr) +
                            ", last grad norm=" + std::to_string(last_grad_norm) + ")");
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw DivergedError("non-finite values at step " + std::to_string(step) +
                          " (lr=" + std::to_string(lr) +
                          ", last grad norm=" + std::to_string(last_grad_norm) +
                          "): " + e.what());
    }
    last_grad_norm = opt.grad_norm();
    if (!std::isfinite(last_grad_norm))
      throw DivergedError("non-finite gradients at step " + std::to_string(step) +
                          " (lr=" + std::to_string(lr) + ", loss=" + std::to_string(loss_value) +
                          ")");
    opt.step(step, lr, tc);
    report.loss_curve.emplace_back(step, loss_value);
    if (on_log && (step % std::max<std::size_t>(tc.log_every, 1) == 0 || step == tc.steps))
      on_log(step, loss_value, lr);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.tokens_seen = static_cast<std::int64_t>(tc.steps) *
                       static_cast<std::int64_t>(tc.batch_size) *
                       static_cast<std::int64_t>(cfg.max_seq_len);
  const std::size_t tail = std::min<std::size_t>(100, report.loss_curve.size());
  double acc = 0;
  for (std::size_t i = report.loss_curve.size() - tail; i < report.loss_curve.size(); ++i)
    acc += report.loss_curve[i].second;
  report.final_loss = acc / static_cast<double>(tail);
  return report;
}

// ---------------------------------------------------------------------------
// Strided perplexity
// ---------------------------------------------------------------------------

struct PerplexityReport {
  double ppl = 0.0;
  std::size_t scored_tokens = 0;
  std::size_t windows = 0;
};

unsigned resolve_thread_cap(unsigned requested);

// Sliding-window evaluation: the first window scores every predictable token
// it covers; each following window advances by `stride` and scores only the
// `stride` freshly covered tokens (each from >= window-stride context). Token
// t is scored from the logits at the previous position, so contributions sum
// to len(text)-1 for every stride <= window.
template <typename T>
PerplexityReport evaluate_perplexity_detailed(const Model<T>& model,
                                              std::span<const std::int32_t> text,
                                              std::size_t stride, std::size_t window,
                                              unsigned threads = 0) {
  if (model.config().arch != Arch::decoder_only)
    throw ContractError("perplexity needs a decoder_only model");
  if (text.size() < 2) throw ContractError("perplexity needs at least 2 tokens");
  if (window == 0) window = model.config().max_seq_len;
  window = std::min(window, model.config().max_seq_len);
  if (window < 2) throw ContractError("window must be >= 2");
  if (stride < 1 || stride > window)
    throw ContractError("stride must lie in [1, window=" + std::to_string(window) + "]");

  struct Segment {
    std::size_t begin, end;    // input token range [begin, end)
    std::size_t t_lo, t_hi;    // scored target indices, inclusive
  };
  std::vector<Segment> segs;
  const std::size_t n = text.size();
  {
    std::size_t b = 0;
    std::size_t e = std::min(b + window, n);
    std::size_t t_lo = 1;
    std::size_t t_hi = std::min(e, n - 1);
    segs.push_back({b, e, t_lo, t_hi});
    while (t_hi < n - 1) {
      b += stride;
      e = std::min(b + window, n);
      t_lo = t_hi + 1;
      t_hi = std::min(e, n - 1);
      segs.push_back({b, e, t_lo, t_hi});
    }
  }

  std::vector<std::pair<double, std::size_t>> partial(segs.size());
  auto score_segment = [&](std::size_t si) {
    const Segment& s = segs[si];
    std::vector<std::int32_t> win(text.begin() + static_cast<std::ptrdiff_t>(s.begin),
                                  text.begin() + static_cast<std::ptrdiff_t>(s.end));
    const Tensor<T> logits = model.logits(win, 1);
    const std::size_t vocab = logits.shape()[1];
    double nll = 0;
    for (std::size_t t = s.t_lo; t <= s.t_hi; ++t) {
      const T* row = logits.data() + (t - 1 - s.begin) * vocab;
      double mx = static_cast<double>(row[0]);
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double se = 0;
      for (std::size_t j = 0; j < vocab; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
      const double lse = mx + std::log(se);
      nll += lse - static_cast<double>(row[static_cast<std::size_t>(text[t])]);
    }
    partial[si] = {nll, s.t_hi - s.t_lo + 1};
  };

  const unsigned nthreads = std::min<unsigned>(resolve_thread_cap(threads),
                                               static_cast<unsigned>(segs.size()));
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < segs.size(); ++i) score_segment(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(nthreads);
    for (unsigned w = 0; w < nthreads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < segs.size(); i += nthreads) score_segment(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // Fixed summation order keeps the result identical for any thread count.
  double total_nll = 0;
  std::size_t total_count = 0;
  for (const auto& [nll, count] : partial) {
    total_nll += nll;
    total_count += count;
  }
  return {std::exp(total_nll / static_cast<double>(total_count)), total_count, segs.size()};
}

template <typename T>
double evaluate_perplexity(const Model<T>& model, std::span<const std::int32_t> text,
                           std::size_t stride = 256, std::size_t window = 0,
                           unsigned threads = 0) {
  return evaluate_perplexity_detailed(model, text, stride, window, threads).ppl;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Layout: magic "MHELAB01", u64 LE header length, text header (config as
// key=value lines plus a tensor manifest of name/shape/offset), then raw
// little-endian fp32 payloads in manifest order.

void save_checkpoint(const Model<float>& model, const std::string& path);
void save_checkpoint(const Model<double>& model, const std::string& path);
Model<float> load_checkpoint(const std::string& path);

}  // namespace mhelab
