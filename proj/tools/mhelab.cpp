// mhelab: parameter/memory accounting, efficiency metrics, and desk-scale
// training/evaluation for the attention zoo.

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mhelab/accounting.hpp"
#include "mhelab/attention.hpp"
#include "mhelab/gradcheck.hpp"
#include "mhelab/metrics.hpp"
#include "mhelab/model.hpp"

using json = nlohmann::json;
using namespace mhelab;

namespace {

struct GlobalOpts {
  std::uint64_t seed = 0;
  std::string precision = "fp32";
  std::string out;
  std::string format = "table";
};

std::string with_commas(std::int64_t v) {
  const std::string raw = std::to_string(v < 0 ? -v : v);
  std::string s;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (i > 0 && (raw.size() - i) % 3 == 0) s += ',';
    s += raw[i];
  }
  return (v < 0 ? "-" : "") + s;
}

// "28,311,552 (28.31M)" for large counts, plain digits otherwise.
std::string fmt_count(std::int64_t v) {
  if (std::llabs(v) < 1000000) return with_commas(v);
  char buf[32];
  if (std::llabs(v) >= 1000000000)
    std::snprintf(buf, sizeof(buf), "%.2fB", static_cast<double>(v) / 1e9);
  else
    std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(v) / 1e6);
  return with_commas(v) + " (" + buf + ")";
}

std::string fmt_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::vector<AttentionVariant> parse_variant_list(const std::string& spec) {
  if (spec == "all") return {kAllVariants.begin(), kAllVariants.end()};
  std::vector<AttentionVariant> out;
  std::istringstream is(spec);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(parse_variant(part));
  if (out.empty()) throw ContractError("empty variant list");
  return out;
}

class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary | std::ios::trunc);
      if (!file_) throw IoError("cannot open output file: " + path);
    }
  }
  std::ostream& os() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

struct ParamsArgs {
  std::string variants = "all";
  std::int64_t layers = 12;
  std::int64_t heads = 12;
  std::int64_t head_dim = 64;
  std::string convention = "experiment";
  std::string arch = "encoder";
};

int cmd_params(const GlobalOpts& g, const ParamsArgs& a) {
  Output out(g.out);
  const auto variants = parse_variant_list(a.variants);
  const auto conv = accounting::parse_convention(a.convention);
  std::int64_t sublayers = a.layers;
  if (a.arch == "encdec") {
    if (a.layers % 2 != 0)
      throw ContractError("encdec needs an even --layers count (half encoder, half decoder)");
    sublayers = accounting::encdec_sublayers(a.layers / 2, a.layers / 2);
  } else if (a.arch != "encoder" && a.arch != "decoder") {
    throw ContractError("unknown --arch '" + a.arch + "' (valid: encoder, decoder, encdec)");
  }

  if (g.format == "table") {
    out.os() << "convention=" << accounting::convention_name(conv) << " layers=" << a.layers
             << " (attention sublayers=" << sublayers << ") heads=" << a.heads
             << " head_dim=" << a.head_dim << "\n";
    std::fprintf(stdout, "%s", "");
    out.os() << "variant    qkv/sublayer      total\n";
  } else if (g.format == "csv") {
    out.os() << "variant,convention,layers,sublayers,heads,head_dim,qkv_per_sublayer,total\n";
  }
  for (AttentionVariant v : variants) {
    const std::int64_t qkv = accounting::attention_params(v, a.heads, a.head_dim);
    const std::int64_t total = conv == accounting::Convention::table4
                                   ? accounting::table4_params(v, sublayers, a.heads, a.head_dim)
                                   : accounting::experiment_params(v, sublayers, a.heads,
                                                                   a.head_dim);
    if (g.format == "table") {
      char line[160];
      std::snprintf(line, sizeof(line), "%-10s %-17s %s\n", std::string(variant_name(v)).c_str(),
                    with_commas(qkv).c_str(), fmt_count(total).c_str());
      out.os() << line;
    } else if (g.format == "csv") {
      out.os() << variant_name(v) << ',' << accounting::convention_name(conv) << ',' << a.layers
               << ',' << sublayers << ',' << a.heads << ',' << a.head_dim << ',' << qkv << ','
               << total << '\n';
    } else {
      json j{{"variant", variant_name(v)},
             {"convention", accounting::convention_name(conv)},
             {"layers", a.layers},
             {"sublayers", sublayers},
             {"heads", a.heads},
             {"head_dim", a.head_dim},
             {"qkv_per_sublayer", qkv},
             {"total", total}};
      out.os() << j.dump() << '\n';
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// memory
// ---------------------------------------------------------------------------

struct MemoryArgs {
  std::string variants = "all";
  std::int64_t heads = 12;
  std::int64_t head_dim = 64;
  std::int64_t batch = 32;
  std::int64_t seq = 512;
  std::int64_t dm = 0;  // defaults to heads*head_dim
};

int cmd_memory(const GlobalOpts& g, const MemoryArgs& a) {
  Output out(g.out);
  const auto variants = parse_variant_list(a.variants);
  const std::int64_t dm = a.dm > 0 ? a.dm : a.heads * a.head_dim;
  const auto mha_bytes = accounting::memory_usage(
      accounting::per_sublayer_total(AttentionVariant::mha, a.heads, a.head_dim), a.batch, a.seq,
      dm);

  if (g.format == "table")
    out.os() << "per attention block: batch=" << a.batch << " seq=" << a.seq << " d_m=" << dm
             << " heads=" << a.heads << " head_dim=" << a.head_dim << "\n"
             << "variant    weights      gradients    adam_states  activations  total        "
                "saving%\n";
  else if (g.format == "csv")
    out.os() << accounting::sweep_csv_header() << '\n';

  for (AttentionVariant v : variants) {
    const std::int64_t params = accounting::per_sublayer_total(v, a.heads, a.head_dim);
    const auto bytes = accounting::memory_usage(params, a.batch, a.seq, dm);
    const double saving = accounting::saving_ratio(bytes.total, mha_bytes.total);
    if (g.format == "table") {
      char line[256];
      std::snprintf(line, sizeof(line), "%-10s %-12" PRId64 " %-12" PRId64 " %-12" PRId64
                    " %-12" PRId64 " %-12" PRId64 " %6.2f\n",
                    std::string(variant_name(v)).c_str(), bytes.weights, bytes.gradients,
                    bytes.adam_states, bytes.activations, bytes.total, saving);
      out.os() << line;
    } else if (g.format == "csv") {
      accounting::SweepRow row;
      row.variant = v;
      row.layers = 1;
      row.heads = a.heads;
      row.head_dim = a.head_dim;
      row.qkv_params = accounting::attention_params(v, a.heads, a.head_dim);
      row.total_params = params;
      row.bytes = bytes;
      row.saving_pct = saving;
      out.os() << accounting::sweep_row_csv(row) << '\n';
    } else {
      json j{{"variant", variant_name(v)},     {"params", params},
             {"weights", bytes.weights},       {"gradients", bytes.gradients},
             {"adam_states", bytes.adam_states}, {"activations", bytes.activations},
             {"total", bytes.total},           {"saving_pct", fmt_fixed(saving, 2)}};
      out.os() << j.dump() << '\n';
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string variants = "all";
  std::string heads_range;  // a:b[:step]
  std::string grid;         // L1,L2xH1,H2
  std::int64_t layers = 1;
  std::int64_t head_dim = 64;
  std::string convention = "table4";
  std::int64_t batch = 32;
  std::int64_t seq = 512;
};

std::vector<std::int64_t> parse_int_list(const std::string& s) {
  std::vector<std::int64_t> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(std::stoll(part));
  return out;
}

int cmd_sweep(const GlobalOpts& g, const SweepArgs& a) {
  Output out(g.out);
  accounting::SweepConfig cfg;
  cfg.variants = parse_variant_list(a.variants);
  cfg.head_dim = a.head_dim;
  cfg.convention = accounting::parse_convention(a.convention);
  cfg.batch = a.batch;
  cfg.seq = a.seq;

  if (!a.heads_range.empty() && !a.grid.empty())
    throw ContractError("use either --heads-range or --grid, not both");
  if (!a.heads_range.empty()) {
    std::int64_t lo = 0, hi = 0, step = 1;
    const auto parts = [&] {
      std::vector<std::string> p;
      std::istringstream is(a.heads_range);
      std::string x;
      while (std::getline(is, x, ':')) p.push_back(x);
      return p;
    }();
    if (parts.size() < 2 || parts.size() > 3)
      throw ContractError("--heads-range wants a:b[:step], got '" + a.heads_range + "'");
    lo = std::stoll(parts[0]);
    hi = std::stoll(parts[1]);
    if (parts.size() == 3) step = std::stoll(parts[2]);
    if (step < 1) throw ContractError("--heads-range step must be >= 1");
    for (std::int64_t h = lo; h <= hi; h += step) cfg.grid.emplace_back(a.layers, h);
  } else if (!a.grid.empty()) {
    const auto xpos = a.grid.find('x');
    if (xpos == std::string::npos)
      throw ContractError("--grid wants LAYERS_LISTxHEADS_LIST, e.g. 12,24,48x32,64");
    for (std::int64_t l : parse_int_list(a.grid.substr(0, xpos)))
      for (std::int64_t h : parse_int_list(a.grid.substr(xpos + 1))) cfg.grid.emplace_back(l, h);
  }
  // An empty grid yields a header-only CSV.

  const auto rows = accounting::scale_sweep(cfg);
  if (g.format == "json-lines") {
    for (const auto& r : rows) {
      json j{{"variant", variant_name(r.variant)}, {"layers", r.layers},
             {"heads", r.heads},                   {"head_dim", r.head_dim},
             {"qkv_params", r.qkv_params},         {"total_params", r.total_params},
             {"total_bytes", r.bytes.total},       {"saving_pct", fmt_fixed(r.saving_pct, 2)}};
      out.os() << j.dump() << '\n';
    }
  } else {
    out.os() << accounting::sweep_csv_header() << '\n';
    for (const auto& r : rows) out.os() << accounting::sweep_row_csv(r) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string variant = "mhe_mul";
  std::string task = "copy";
  std::string arch = "decoder";
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 8;
  std::size_t ffn_dim = 0;
  std::size_t vocab = 16;
  std::size_t seq_len = 32;
  std::size_t prefix_len = 0;  // defaults to seq_len/2
  double dropout = 0.0;
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 3e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup = 0;
  std::string schedule = "linear";
  std::string objective;  // default derived from arch
  std::string checkpoint = "model.mhe";
  std::size_t log_every = 100;
};

std::unique_ptr<DataSource> make_source(const TrainArgs& a, std::size_t& vocab,
                                        std::uint64_t seed) {
  if (a.task == "copy") {
    const std::size_t prefix = a.prefix_len > 0 ? a.prefix_len : a.seq_len / 2;
    if (2 * prefix != a.seq_len)
      throw ContractError("copy task needs seq_len == 2*prefix_len");
    return std::make_unique<CopyTaskSource>(static_cast<std::int32_t>(vocab), prefix, seed);
  }
  if (a.task.rfind("bytes:", 0) == 0) {
    vocab = static_cast<std::size_t>(kByteVocab);
    return std::make_unique<TokenStreamSource>(load_byte_tokens(a.task.substr(6)));
  }
  throw ContractError("unknown --task '" + a.task + "' (valid: copy, bytes:<file>)");
}

template <typename T>
int run_train(const GlobalOpts& g, const TrainArgs& a, std::ostream& os) {
  std::size_t vocab = a.vocab;
  auto source = make_source(a, vocab, g.seed + 1);

  ModelConfig cfg;
  cfg.arch = parse_arch(a.arch == "decoder" ? "decoder_only" : a.arch == "encoder"
                                            ? "encoder_only" : a.arch);
  cfg.n_layers = a.layers;
  cfg.n_heads = a.heads;
  cfg.head_dim = a.head_dim;
  cfg.ffn_dim = a.ffn_dim;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = a.seq_len;
  cfg.variant = parse_variant(a.variant);
  cfg.dropout = a.dropout;
  cfg.seed = g.seed;
  cfg.validate();

  TrainConfig tc;
  tc.steps = a.steps;
  tc.batch_size = a.batch;
  tc.lr = a.lr;
  tc.weight_decay = a.weight_decay;
  tc.adam_beta1 = a.beta1;
  tc.adam_beta2 = a.beta2;
  tc.adam_eps = a.eps;
  tc.warmup_steps = a.warmup;
  tc.schedule = parse_schedule(a.schedule);
  tc.objective = a.objective.empty()
                     ? (cfg.arch == Arch::decoder_only ? Objective::clm : Objective::mlm)
                     : parse_objective(a.objective);
  tc.log_every = a.log_every;

  Model<T> model(cfg);
  const bool jsonl = g.format == "json-lines";
  auto log = [&](std::size_t step, double loss, double lr) {
    if (jsonl)
      os << json{{"step", step}, {"loss", loss}, {"lr", lr}}.dump() << '\n';
    else
      os << "step " << step << "  loss " << fmt_fixed(loss, 6) << "  lr " << fmt_fixed(lr, 8)
         << '\n';
  };
  const TrainReport report = train(model, *source, tc, log);
  save_checkpoint(model, a.checkpoint);

  if (jsonl) {
    // No wall-clock field here: csv/json-lines output is byte-deterministic
    // for a given seed and flags.
    os << json{{"final_loss", report.final_loss},
               {"tokens_seen", report.tokens_seen},
               {"checkpoint", a.checkpoint}}
              .dump()
       << '\n';
  } else {
    os << "variant=" << variant_name(cfg.variant) << " steps=" << tc.steps
       << " final_loss=" << fmt_fixed(report.final_loss, 6)
       << " tokens_seen=" << report.tokens_seen << " wall_s=" << fmt_fixed(report.wall_seconds, 2)
       << "\ncheckpoint written to " << a.checkpoint << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string text;
  std::size_t stride = 256;
  std::size_t window = 0;
  unsigned threads = 0;
};

int cmd_eval(const GlobalOpts& g, const EvalArgs& a) {
  Output out(g.out);
  Model<float> model = load_checkpoint(a.checkpoint);
  const auto tokens = load_byte_tokens(a.text);
  PerplexityReport rep;
  if (g.precision == "fp64") {
    const Model<double> m64 = convert_model<double>(model);
    rep = evaluate_perplexity_detailed(m64, tokens, a.stride, a.window, a.threads);
  } else {
    rep = evaluate_perplexity_detailed(model, tokens, a.stride, a.window, a.threads);
  }
  if (g.format == "json-lines")
    out.os() << json{{"perplexity", rep.ppl},
                     {"scored_tokens", rep.scored_tokens},
                     {"windows", rep.windows}}
                    .dump()
             << '\n';
  else
    out.os() << "perplexity " << fmt_fixed(rep.ppl, 4) << " over " << rep.scored_tokens
             << " tokens in " << rep.windows << " windows\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string variants = "all";
  std::size_t samples = 0;  // 0 = every entry
};

int cmd_gradcheck(const GlobalOpts& g, const GradcheckArgs& a, std::ostream& os) {
  bool all_ok = true;
  for (AttentionVariant v : parse_variant_list(a.variants)) {
    ModelConfig cfg;
    cfg.arch = Arch::decoder_only;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.head_dim = 2;
    cfg.vocab_size = 5;
    cfg.max_seq_len = 4;
    cfg.variant = v;
    cfg.seed = g.seed;
    Model<double> model(cfg);

    std::mt19937_64 rng(g.seed + 17);
    std::uniform_int_distribution<std::int32_t> tok(0, 4);
    std::vector<std::int32_t> tokens(4);
    for (auto& t : tokens) t = tok(rng);
    std::vector<std::int32_t> targets(4);
    for (auto& t : targets) t = tok(rng);
    const std::vector<double> weights{1, 1, 1, 1};
    auto loss = [&] { return cross_entropy_rows(model.logits(tokens, 1), targets, weights); };

    gradcheck::Options opt;
    opt.max_entries_per_tensor = a.samples;
    opt.seed = g.seed;
    const auto results = gradcheck::check(loss, model.parameters(), opt);
    for (const auto& r : results) {
      if (g.format == "json-lines") {
        os << json{{"variant", variant_name(v)}, {"param", r.name},       {"ok", r.ok},
                   {"checked", r.checked},       {"max_abs", r.max_abs_diff},
                   {"max_rel", r.max_rel_diff}}
                  .dump()
           << '\n';
      } else {
        os << (r.ok ? "ok   " : "FAIL ") << variant_name(v) << '/' << r.name << "  checked "
           << r.checked << "  max_rel " << r.max_rel_diff;
        if (!r.ok) os << "  " << r.worst_entry;
        os << '\n';
      }
      all_ok = all_ok && r.ok;
    }
  }
  os << (all_ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct MetricsArgs {
  std::string scores = "data/published_scores.csv";
};

int cmd_metrics(const GlobalOpts& g, const MetricsArgs& a) {
  Output out(g.out);
  const auto rows = metrics::load_scores_csv(a.scores);
  const auto reports = metrics::build_report(rows);

  bool all_within = true;
  if (g.format == "csv")
    out.os() << "benchmark,model,score,params,prr,published_prr,prr_dev,prr_ok,peop,"
                "published_peop,peop_dev,peop_ok\n";
  for (const auto& r : reports) {
    const std::string peop_str = r.peop ? fmt_fixed(*r.peop, 4) : "-";
    const std::string pub_prr = r.published_prr ? fmt_fixed(r.published_prr->value, 1) : "-";
    const std::string pub_peop =
        r.published_peop ? fmt_fixed(r.published_peop->value, r.published_peop->decimals) : "-";
    all_within = all_within && r.prr_within_tolerance && r.peop_within_tolerance;
    if (g.format == "csv") {
      out.os() << r.benchmark << ',' << r.model_name << ',' << r.score << ',' << r.params << ','
               << fmt_fixed(r.prr, 4) << ',' << pub_prr << ','
               << (r.prr_deviation ? fmt_fixed(*r.prr_deviation, 4) : "-") << ','
               << (r.prr_within_tolerance ? "1" : "0") << ',' << peop_str << ',' << pub_peop
               << ',' << (r.peop_deviation ? fmt_fixed(*r.peop_deviation, 4) : "-") << ','
               << (r.peop_within_tolerance ? "1" : "0") << '\n';
    } else if (g.format == "json-lines") {
      json j{{"benchmark", r.benchmark}, {"model", r.model_name},   {"score", r.score},
             {"params", r.params},       {"prr", r.prr},            {"prr_ok", r.prr_within_tolerance},
             {"peop_ok", r.peop_within_tolerance}};
      if (r.peop) j["peop"] = *r.peop;
      if (r.published_prr) j["published_prr"] = r.published_prr->value;
      if (r.published_peop) j["published_peop"] = r.published_peop->value;
      out.os() << j.dump() << '\n';
    } else {
      char line[256];
      std::snprintf(line, sizeof(line), "%-14s %-8s score %-7.6g params %-12" PRId64
                    " PRR %-8.1f (pub %-6s%s) PEoP %-9s (pub %-6s%s)\n",
                    r.benchmark.c_str(), r.model_name.c_str(), r.score, r.params, r.prr,
                    pub_prr.c_str(), r.prr_within_tolerance ? "" : " DEVIATES",
                    peop_str.c_str(), pub_peop.c_str(),
                    r.peop_within_tolerance ? "" : " DEVIATES");
      out.os() << line;
    }
  }
  if (g.format == "table")
    out.os() << (all_within ? "all cells within tolerance\n"
                            : "some cells deviate beyond tolerance\n");
  return all_within ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mhelab: memory-efficient attention laboratory"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file; command-line flags win");

  GlobalOpts g;
  app.add_option("--seed", g.seed, "global RNG seed")->capture_default_str();
  app.add_option("--precision", g.precision, "numeric precision")
      ->check(CLI::IsMember({"fp32", "fp64"}))
      ->capture_default_str();
  app.add_option("--out", g.out, "write output to this file instead of stdout");
  app.add_option("--format", g.format, "output format")
      ->check(CLI::IsMember({"table", "csv", "json-lines"}))
      ->capture_default_str();

  ParamsArgs pa;
  auto* params = app.add_subcommand("params", "attention parameter counts");
  params->add_option("variant", pa.variants, "variant name, comma list, or 'all'")->required();
  params->add_option("--layers", pa.layers, "transformer layers")->capture_default_str();
  params->add_option("--heads", pa.heads, "attention heads n")->capture_default_str();
  params->add_option("--head-dim", pa.head_dim, "head dimension d")->capture_default_str();
  params->add_option("--convention", pa.convention, "table4 (QKV only) or experiment (+W^O)")
      ->check(CLI::IsMember({"table4", "experiment"}))
      ->capture_default_str();
  params->add_option("--arch", pa.arch,
                     "encoder|decoder|encdec (encdec counts decoder cross-attention)")
      ->capture_default_str();

  MemoryArgs ma;
  auto* memory = app.add_subcommand("memory", "per-block memory byte model");
  memory->add_option("variant", ma.variants, "variant name, comma list, or 'all'");
  memory->add_option("--heads", ma.heads)->capture_default_str();
  memory->add_option("--head-dim", ma.head_dim)->capture_default_str();
  memory->add_option("--batch", ma.batch)->capture_default_str();
  memory->add_option("--seq", ma.seq)->capture_default_str();
  memory->add_option("--dm", ma.dm, "hidden width (default heads*head_dim)");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "parameter scaling sweeps (CSV)");
  sweep->add_option("--variants", sa.variants)->capture_default_str();
  sweep->add_option("--heads-range", sa.heads_range, "a:b[:step] head counts");
  sweep->add_option("--grid", sa.grid, "LAYERS_LISTxHEADS_LIST, e.g. 12,24,48x32,64");
  sweep->add_option("--layers", sa.layers, "layer count for --heads-range rows")
      ->capture_default_str();
  sweep->add_option("--head-dim", sa.head_dim)->capture_default_str();
  sweep->add_option("--convention", sa.convention)
      ->check(CLI::IsMember({"table4", "experiment"}))
      ->capture_default_str();
  sweep->add_option("--batch", sa.batch)->capture_default_str();
  sweep->add_option("--seq", sa.seq)->capture_default_str();

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "desk-scale LM training");
  train_cmd->add_option("--variant", ta.variant)->capture_default_str();
  train_cmd->add_option("--task", ta.task, "copy or bytes:<file>")->capture_default_str();
  train_cmd->add_option("--arch", ta.arch, "decoder or encoder")->capture_default_str();
  train_cmd->add_option("--layers", ta.layers)->capture_default_str();
  train_cmd->add_option("--heads", ta.heads)->capture_default_str();
  train_cmd->add_option("--head-dim", ta.head_dim)->capture_default_str();
  train_cmd->add_option("--ffn-dim", ta.ffn_dim, "0 = 4*model_dim");
  train_cmd->add_option("--vocab", ta.vocab)->capture_default_str();
  train_cmd->add_option("--seq-len", ta.seq_len)->capture_default_str();
  train_cmd->add_option("--prefix-len", ta.prefix_len, "copy-task prefix (default seq/2)");
  train_cmd->add_option("--dropout", ta.dropout)->capture_default_str();
  train_cmd->add_option("--steps", ta.steps)->capture_default_str();
  train_cmd->add_option("--batch", ta.batch)->capture_default_str();
  train_cmd->add_option("--lr", ta.lr)->capture_default_str();
  train_cmd->add_option("--weight-decay", ta.weight_decay)->capture_default_str();
  train_cmd->add_option("--beta1", ta.beta1)->capture_default_str();
  train_cmd->add_option("--beta2", ta.beta2)->capture_default_str();
  train_cmd->add_option("--eps", ta.eps)->capture_default_str();
  train_cmd->add_option("--warmup", ta.warmup)->capture_default_str();
  train_cmd->add_option("--schedule", ta.schedule)
      ->check(CLI::IsMember({"linear", "constant"}))
      ->capture_default_str();
  train_cmd->add_option("--objective", ta.objective, "clm|mlm (default from --arch)");
  train_cmd->add_option("--checkpoint", ta.checkpoint)->capture_default_str();
  train_cmd->add_option("--log-every", ta.log_every)->capture_default_str();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "strided perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  eval_cmd->add_option("--text", ea.text, "UTF-8/byte text file")->required();
  eval_cmd->add_option("--stride", ea.stride)->capture_default_str();
  eval_cmd->add_option("--window", ea.window, "0 = model max_seq_len");
  eval_cmd->add_option("--threads", ea.threads, "0 = auto (capped by MHELAB_THREADS)");

  GradcheckArgs ga;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck_cmd->add_option("variant", ga.variants, "variant name, comma list, or 'all'");
  gradcheck_cmd->add_option("--samples", ga.samples, "entries per tensor (0 = all)");

  MetricsArgs xa;
  auto* metrics_cmd = app.add_subcommand("metrics", "recompute PRR/PEoP from published scores");
  metrics_cmd->add_option("--scores", xa.scores, "published score CSV")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*params) return cmd_params(g, pa);
    if (*memory) return cmd_memory(g, ma);
    if (*sweep) return cmd_sweep(g, sa);
    if (*train_cmd) {
      Output out(g.out);
      return g.precision == "fp64" ? run_train<double>(g, ta, out.os())
                                   : run_train<float>(g, ta, out.os());
    }
    if (*eval_cmd) return cmd_eval(g, ea);
    if (*gradcheck_cmd) {
      Output out(g.out);
      return cmd_gradcheck(g, ga, out.os());
    }
    if (*metrics_cmd) return cmd_metrics(g, xa);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
