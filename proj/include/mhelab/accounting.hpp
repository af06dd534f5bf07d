#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhelab/attention_variant.hpp"

// Exact integer parameter and memory accounting for attention sublayers.
// Two counting conventions exist side by side:
//   * "table4":     query/key/value projections only (head pooling excluded),
//   * "experiment": table4 plus the (n*d)^2 output projection, per sublayer.
// All counts are exact integers; rounding to M/B happens only when formatting.

namespace mhelab::accounting {

enum class Convention { table4, experiment };

Convention parse_convention(const std::string& name);
const char* convention_name(Convention c);

// QKV parameter count of one attention sublayer (the table4 convention).
//   SHA  3d^2n    MHA 3d^2n^2   EL-att d^2n^2   MQA d^2n^2+2d^2n
//   SKV  2d^2n^2  MHE-Add/Mul 3d^2n+3dn        (d_m = n*d throughout)
std::int64_t attention_params(AttentionVariant v, std::int64_t n, std::int64_t d);

// Signed difference attention_params(v) - attention_params(SHA); negative for
// EL-att with n < 3.
std::int64_t extra_over_sha(AttentionVariant v, std::int64_t n, std::int64_t d);

// (n*d)^2 scalars of the output projection pooling the heads.
std::int64_t output_proj_params(std::int64_t n, std::int64_t d);

// One sublayer under the experiment convention: attention_params + (n*d)^2.
std::int64_t per_sublayer_total(AttentionVariant v, std::int64_t n, std::int64_t d);

// Model-level count over `sublayers` attention sublayers, experiment
// convention. Encoder-only / decoder-only stacks have one sublayer per layer;
// an encoder-decoder stack has enc + 2*dec (self- plus cross-attention).
std::int64_t experiment_params(AttentionVariant v, std::int64_t sublayers, std::int64_t n,
                               std::int64_t d);

// Model-level count under the table4 convention (used by the scaling figures
// and the GPT-3 projection).
std::int64_t table4_params(AttentionVariant v, std::int64_t layers, std::int64_t n,
                           std::int64_t d);

// Attention sublayers of an encoder-decoder with enc_layers + dec_layers,
// counting decoder cross-attention like any other attention sublayer.
std::int64_t encdec_sublayers(std::int64_t enc_layers, std::int64_t dec_layers);

// fp16 mixed-precision byte model: weights and gradients 6 bytes/param,
// Adam states 8 bytes/param, activations 2 bytes per batch*seq*d_m element.
struct MemoryBytes {
  std::int64_t weights = 0;
  std::int64_t gradients = 0;
  std::int64_t adam_states = 0;
  std::int64_t activations = 0;
  std::int64_t total = 0;
};

MemoryBytes memory_usage(std::int64_t param_count, std::int64_t batch, std::int64_t seq,
                         std::int64_t d_m);

// 100 * (1 - candidate/mha); callers round to 2 decimals for display.
double saving_ratio(std::int64_t candidate_total_bytes, std::int64_t mha_total_bytes);

struct BudgetReport {
  AttentionVariant variant;
  std::int64_t layers = 1;
  std::int64_t n_heads = 0;
  std::int64_t head_dim = 0;
  std::int64_t per_layer_qkv = 0;
  std::int64_t per_layer_total = 0;
  std::int64_t model_total = 0;
  MemoryBytes bytes;
  double saving_ratio_vs_mha = 0.0;
};

// Per-block budget in the Table 10 setting: bytes computed from one
// sublayer's experiment-convention count.
BudgetReport budget_report(AttentionVariant v, std::int64_t layers, std::int64_t n,
                           std::int64_t d, std::int64_t batch, std::int64_t seq);

struct SweepRow {
  AttentionVariant variant;
  std::int64_t layers = 0;
  std::int64_t heads = 0;
  std::int64_t head_dim = 0;
  std::int64_t qkv_params = 0;    // one sublayer, table4 convention
  std::int64_t total_params = 0;  // all layers, selected convention
  MemoryBytes bytes;
  double saving_pct = 0.0;  // vs MHA at the same geometry
};

struct SweepConfig {
  std::vector<AttentionVariant> variants;
  std::vector<std::pair<std::int64_t, std::int64_t>> grid;  // (layers, heads)
  std::int64_t head_dim = 64;
  Convention convention = Convention::table4;
  std::int64_t batch = 32;
  std::int64_t seq = 512;
};

std::vector<SweepRow> scale_sweep(const SweepConfig& cfg);

// CSV schema (header mandatory, UTF-8, LF):
// variant,layers,heads,head_dim,qkv_params,total_params,weights_bytes,
// grad_bytes,adam_bytes,act_bytes,total_bytes,saving_pct
std::string sweep_csv_header();
std::string sweep_row_csv(const SweepRow& row);

}  // namespace mhelab::accounting
