#include "mhelab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mhelab/accounting.hpp"
#include "mhelab/errors.hpp"

namespace mhelab::metrics {

IndicatorKind parse_indicator(const std::string& name) {
  if (name == "direct") return IndicatorKind::direct;
  if (name == "inverse") return IndicatorKind::inverse;
  throw ContractError("unknown indicator kind '" + name + "' (valid: direct, inverse)");
}

const char* indicator_name(IndicatorKind k) {
  return k == IndicatorKind::direct ? "direct" : "inverse";
}

double prr(double score, double mha_score, IndicatorKind kind) {
  if (!(mha_score > 0)) throw DomainError("PRR requires a positive MHA reference score");
  if (kind == IndicatorKind::direct) return 100.0 * score / mha_score;
  return 100.0 * (1.0 - (score - mha_score) / mha_score);
}

double peop(double score, double sha_score, std::int64_t params, std::int64_t sha_params,
            IndicatorKind kind) {
  if (!(sha_score > 0)) throw DomainError("PEoP requires a positive SHA reference score");
  if (sha_params <= 0 || params <= 0) throw DomainError("PEoP requires positive parameter counts");
  if (params == sha_params)
    throw DomainError("PEoP is undefined when the model has exactly the SHA parameter count");
  const double num = score / sha_score - 1.0;
  const double den =
      static_cast<double>(params) / static_cast<double>(sha_params) - 1.0;
  const double e = num / den;
  return kind == IndicatorKind::direct ? e : -e;
}

Published Published::parse(const std::string& text) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(text, &pos);
  } catch (const std::exception&) {
    throw FormatError("cannot parse published value '" + text + "'");
  }
  if (pos != text.size()) throw FormatError("trailing junk in published value '" + text + "'");
  int decimals = 0;
  const auto dotpos = text.find('.');
  if (dotpos != std::string::npos) decimals = static_cast<int>(text.size() - dotpos - 1);
  return Published{v, decimals};
}

bool prr_cell_ok(double recomputed, const Published& published) {
  return std::abs(recomputed - published.value) <= kPrrAbsTolerance + 1e-9;
}

bool peop_cell_ok(double recomputed, const Published& published) {
  const double half_ulp = 0.5 * std::pow(10.0, -published.decimals);
  const double tol = std::max(kPeopRelTolerance * std::abs(published.value), half_ulp);
  return std::abs(recomputed - published.value) <= tol + 1e-12;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

std::vector<ScoreRow> parse_scores_csv(std::istream& in, const std::string& origin) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(origin + ": empty score file");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[trim(header[i])] = i;
  for (const char* required : {"benchmark", "model", "score", "indicator_kind"})
    if (!col.count(required))
      throw FormatError(origin + ": missing required column '" + required + "'");

  auto get = [&](const std::vector<std::string>& fields, const char* name) -> std::string {
    auto it = col.find(name);
    if (it == col.end() || it->second >= fields.size()) return {};
    return trim(fields[it->second]);
  };

  std::vector<ScoreRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto fields = split_csv_line(line);
    ScoreRow row;
    row.benchmark = get(fields, "benchmark");
    row.model = get(fields, "model");
    const std::string score = get(fields, "score");
    const std::string kind = get(fields, "indicator_kind");
    if (row.benchmark.empty() || row.model.empty() || score.empty() || kind.empty())
      throw FormatError(origin + ":" + std::to_string(lineno) + ": incomplete score row");
    try {
      row.score = std::stod(score);
    } catch (const std::exception&) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": bad score '" + score + "'");
    }
    row.kind = parse_indicator(kind);
    auto opt_int = [&](const char* name) -> std::int64_t {
      const std::string v = get(fields, name);
      return v.empty() ? 0 : std::stoll(v);
    };
    row.sublayers = opt_int("sublayers");
    row.heads = opt_int("heads");
    row.head_dim = opt_int("head_dim");
    const std::string pp = get(fields, "published_prr");
    if (!pp.empty() && pp != "-") row.published_prr = Published::parse(pp);
    const std::string pe = get(fields, "published_peop");
    if (!pe.empty() && pe != "-") row.published_peop = Published::parse(pe);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ScoreRow> load_scores_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open score file: " + path);
  return parse_scores_csv(f, path);
}

std::vector<MetricReport> build_report(const std::vector<ScoreRow>& rows) {
  // Group rows per benchmark, preserving input order of benchmarks and rows.
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ScoreRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.benchmark)) order.push_back(r.benchmark);
    groups[r.benchmark].push_back(&r);
  }

  std::vector<MetricReport> out;
  for (const auto& bench : order) {
    const auto& group = groups[bench];
    const ScoreRow* mha = nullptr;
    const ScoreRow* sha = nullptr;
    for (const ScoreRow* r : group) {
      const AttentionVariant v = parse_variant(r->model);
      if (v == AttentionVariant::mha) mha = r;
      if (v == AttentionVariant::sha) sha = r;
    }
    if (!mha) throw FormatError("benchmark '" + bench + "' lacks its MHA reference row");
    if (!sha) throw FormatError("benchmark '" + bench + "' lacks its SHA reference row");

    auto params_of = [](const ScoreRow& r) -> std::int64_t {
      if (r.sublayers <= 0 || r.heads <= 0 || r.head_dim <= 0) return 0;
      return accounting::experiment_params(parse_variant(r.model), r.sublayers, r.heads,
                                           r.head_dim);
    };
    const std::int64_t sha_params = params_of(*sha);

    for (const ScoreRow* r : group) {
      MetricReport rep;
      rep.benchmark = bench;
      rep.model_name = r->model;
      rep.kind = r->kind;
      rep.score = r->score;
      rep.mha_score = mha->score;
      rep.sha_score = sha->score;
      rep.params = params_of(*r);
      rep.sha_params = sha_params;
      rep.prr = prr(r->score, mha->score, r->kind);
      const bool is_sha = parse_variant(r->model) == AttentionVariant::sha;
      if (!is_sha && rep.params > 0 && sha_params > 0 && rep.params != sha_params)
        rep.peop = peop(r->score, sha->score, rep.params, sha_params, r->kind);

      rep.published_prr = r->published_prr;
      if (rep.published_prr) {
        rep.prr_deviation = rep.prr - rep.published_prr->value;
        rep.prr_within_tolerance = prr_cell_ok(rep.prr, *rep.published_prr);
      }
      rep.published_peop = r->published_peop;
      if (rep.published_peop && rep.peop) {
        rep.peop_deviation = *rep.peop - rep.published_peop->value;
        rep.peop_within_tolerance = peop_cell_ok(*rep.peop, *rep.published_peop);
      }
      out.push_back(std::move(rep));
    }
  }
  return out;
}

}  // namespace mhelab::metrics
