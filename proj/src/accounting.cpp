#include "mhelab/accounting.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "mhelab/errors.hpp"

namespace mhelab {

std::string_view variant_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::sha: return "sha";
    case AttentionVariant::mha: return "mha";
    case AttentionVariant::el_att: return "el_att";
    case AttentionVariant::mqa: return "mqa";
    case AttentionVariant::skv: return "skv";
    case AttentionVariant::mhe_add: return "mhe_add";
    case AttentionVariant::mhe_mul: return "mhe_mul";
  }
  return "?";
}

AttentionVariant parse_variant(std::string_view name) {
  std::string s;
  s.reserve(name.size());
  for (char c : name) s.push_back(c == '-' ? '_' : static_cast<char>(std::tolower(c)));
  for (AttentionVariant v : kAllVariants)
    if (s == variant_name(v)) return v;
  throw ContractError("unknown attention variant '" + std::string(name) +
                      "' (valid: sha, mha, el-att, mqa, skv, mhe-add, mhe-mul)");
}

bool is_mhe(AttentionVariant v) {
  return v == AttentionVariant::mhe_add || v == AttentionVariant::mhe_mul;
}

namespace accounting {

Convention parse_convention(const std::string& name) {
  if (name == "table4") return Convention::table4;
  if (name == "experiment") return Convention::experiment;
  throw ContractError("unknown convention '" + name + "' (valid: table4, experiment)");
}

const char* convention_name(Convention c) {
  return c == Convention::table4 ? "table4" : "experiment";
}

namespace {
void check_dims(std::int64_t n, std::int64_t d) {
  if (n < 1 || d < 1)
    throw ContractError("heads and head_dim must be >= 1, got n=" + std::to_string(n) +
                        " d=" + std::to_string(d));
}
}  // namespace

std::int64_t attention_params(AttentionVariant v, std::int64_t n, std::int64_t d) {
  check_dims(n, d);
  const std::int64_t d2 = d * d;
  switch (v) {
    case AttentionVariant::sha: return 3 * d2 * n;
    case AttentionVariant::mha: return 3 * d2 * n * n;
    case AttentionVariant::el_att: return d2 * n * n;
    case AttentionVariant::mqa: return d2 * n * n + 2 * d2 * n;
    case AttentionVariant::skv: return 2 * d2 * n * n;
    case AttentionVariant::mhe_add:
    case AttentionVariant::mhe_mul: return 3 * d2 * n + 3 * d * n;
  }
  throw ContractError("unreachable variant");
}

std::int64_t extra_over_sha(AttentionVariant v, std::int64_t n, std::int64_t d) {
  return attention_params(v, n, d) - attention_params(AttentionVariant::sha, n, d);
}

std::int64_t output_proj_params(std::int64_t n, std::int64_t d) {
  check_dims(n, d);
  return n * d * n * d;
}

std::int64_t per_sublayer_total(AttentionVariant v, std::int64_t n, std::int64_t d) {
  return attention_params(v, n, d) + output_proj_params(n, d);
}

std::int64_t experiment_params(AttentionVariant v, std::int64_t sublayers, std::int64_t n,
                               std::int64_t d) {
  if (sublayers < 1) throw ContractError("sublayers must be >= 1");
  return sublayers * per_sublayer_total(v, n, d);
}

std::int64_t table4_params(AttentionVariant v, std::int64_t layers, std::int64_t n,
                           std::int64_t d) {
  if (layers < 1) throw ContractError("layers must be >= 1");
  return layers * attention_params(v, n, d);
}

std::int64_t encdec_sublayers(std::int64_t enc_layers, std::int64_t dec_layers) {
  if (enc_layers < 0 || dec_layers < 0 || enc_layers + dec_layers < 1)
    throw ContractError("encoder/decoder layer counts must be non-negative and not both zero");
  return enc_layers + 2 * dec_layers;
}

MemoryBytes memory_usage(std::int64_t param_count, std::int64_t batch, std::int64_t seq,
                         std::int64_t d_m) {
  if (param_count < 1 || batch < 1 || seq < 1 || d_m < 1)
    throw ContractError("memory_usage inputs must be >= 1");
  MemoryBytes b;
  b.weights = param_count * 6;
  b.gradients = param_count * 6;
  b.adam_states = param_count * 8;
  b.activations = batch * seq * d_m * 2;
  b.total = b.weights + b.gradients + b.adam_states + b.activations;
  return b;
}

double saving_ratio(std::int64_t candidate_total_bytes, std::int64_t mha_total_bytes) {
  if (mha_total_bytes <= 0) throw DomainError("MHA total bytes must be positive");
  return 100.0 * (1.0 - static_cast<double>(candidate_total_bytes) /
                            static_cast<double>(mha_total_bytes));
}

BudgetReport budget_report(AttentionVariant v, std::int64_t layers, std::int64_t n,
                           std::int64_t d, std::int64_t batch, std::int64_t seq) {
  BudgetReport r;
  r.variant = v;
  r.layers = layers;
  r.n_heads = n;
  r.head_dim = d;
  r.per_layer_qkv = attention_params(v, n, d);
  r.per_layer_total = per_sublayer_total(v, n, d);
  r.model_total = experiment_params(v, layers, n, d);
  r.bytes = memory_usage(r.per_layer_total, batch, seq, n * d);
  const MemoryBytes mha =
      memory_usage(per_sublayer_total(AttentionVariant::mha, n, d), batch, seq, n * d);
  r.saving_ratio_vs_mha = saving_ratio(r.bytes.total, mha.total);
  return r;
}

std::vector<SweepRow> scale_sweep(const SweepConfig& cfg) {
  if (cfg.head_dim < 1) throw ContractError("head_dim must be >= 1");
  std::vector<SweepRow> rows;
  rows.reserve(cfg.variants.size() * cfg.grid.size());
  for (const auto& [layers, heads] : cfg.grid) {
    for (AttentionVariant v : cfg.variants) {
      SweepRow row;
      row.variant = v;
      row.layers = layers;
      row.heads = heads;
      row.head_dim = cfg.head_dim;
      row.qkv_params = attention_params(v, heads, cfg.head_dim);
      row.total_params = cfg.convention == Convention::table4
                             ? table4_params(v, layers, heads, cfg.head_dim)
                             : experiment_params(v, layers, heads, cfg.head_dim);
      row.bytes = memory_usage(row.total_params, cfg.batch, cfg.seq, heads * cfg.head_dim);
      const std::int64_t mha_total =
          cfg.convention == Convention::table4
              ? table4_params(AttentionVariant::mha, layers, heads, cfg.head_dim)
              : experiment_params(AttentionVariant::mha, layers, heads, cfg.head_dim);
      const MemoryBytes mha_bytes =
          memory_usage(mha_total, cfg.batch, cfg.seq, heads * cfg.head_dim);
      row.saving_pct = saving_ratio(row.bytes.total, mha_bytes.total);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string sweep_csv_header() {
  return "variant,layers,heads,head_dim,qkv_params,total_params,weights_bytes,grad_bytes,"
         "adam_bytes,act_bytes,total_bytes,saving_pct";
}

std::string sweep_row_csv(const SweepRow& row) {
  std::ostringstream os;
  os << variant_name(row.variant) << ',' << row.layers << ',' << row.heads << ',' << row.head_dim
     << ',' << row.qkv_params << ',' << row.total_params << ',' << row.bytes.weights << ','
     << row.bytes.gradients << ',' << row.bytes.adam_states << ',' << row.bytes.activations << ','
     << row.bytes.total << ',';
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", row.saving_pct);
  os << buf;
  return os.str();
}

}  // namespace accounting
}  // namespace mhelab
