#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mhelab/attention_variant.hpp"

// Performance Retention Ratio (PRR, vs the MHA upper bound) and Performance
// Elasticity of Parameters (PEoP, vs the SHA lower bound), plus recomputation
// of both over a published-score table.

namespace mhelab::metrics {

// direct: higher is better (accuracy, F1, BLEU); inverse: lower is better
// (perplexity).
enum class IndicatorKind { direct, inverse };

IndicatorKind parse_indicator(const std::string& name);
const char* indicator_name(IndicatorKind k);

// Percentage retained vs MHA. direct: 100*s/m; inverse: 100*(1-(s-m)/m).
double prr(double score, double mha_score, IndicatorKind kind);

// Relative performance gain over SHA per relative parameter growth over SHA.
// Undefined (domain error) when params == sha_params, matching the "-" cells
// the paper prints for SHA itself.
double peop(double score, double sha_score, std::int64_t params, std::int64_t sha_params,
            IndicatorKind kind);

// A published value as printed, keeping its decimal precision so deviation
// checks can account for print rounding.
struct Published {
  double value = 0.0;
  int decimals = 0;

  static Published parse(const std::string& text);
};

struct ScoreRow {
  std::string benchmark;
  std::string model;  // attention variant tag
  double score = 0.0;
  IndicatorKind kind = IndicatorKind::direct;
  // Geometry used to derive exact parameter counts; 0 when the input file
  // does not carry them (PEoP is then unavailable).
  std::int64_t sublayers = 0;
  std::int64_t heads = 0;
  std::int64_t head_dim = 0;
  std::optional<Published> published_prr;
  std::optional<Published> published_peop;
};

// CSV with a mandatory header. Required columns: benchmark,model,score,
// indicator_kind. Recognized optional columns: sublayers,heads,head_dim,
// published_prr,published_peop.
std::vector<ScoreRow> load_scores_csv(const std::string& path);
std::vector<ScoreRow> parse_scores_csv(std::istream& in, const std::string& origin);

struct MetricReport {
  std::string benchmark;
  std::string model_name;
  IndicatorKind kind = IndicatorKind::direct;
  double score = 0.0;
  double mha_score = 0.0;
  double sha_score = 0.0;
  std::int64_t params = 0;
  std::int64_t sha_params = 0;
  double prr = 0.0;
  std::optional<double> peop;  // absent for the SHA reference row

  std::optional<Published> published_prr;
  std::optional<Published> published_peop;
  std::optional<double> prr_deviation;
  std::optional<double> peop_deviation;
  bool prr_within_tolerance = true;
  bool peop_within_tolerance = true;
};

// Published PRR cells must be reproduced within this absolute tolerance
// (percentage points).
inline constexpr double kPrrAbsTolerance = 0.15;
// Published PEoP cells must be reproduced within 15% relative, or to within
// half an ulp of the printed precision (the paper computed them from
// unrounded scores, so a 2-decimal print can move an 0.0x cell further than
// 15% of its magnitude).
inline constexpr double kPeopRelTolerance = 0.15;

bool prr_cell_ok(double recomputed, const Published& published);
bool peop_cell_ok(double recomputed, const Published& published);

// Recomputes every PRR/PEoP cell from the score column and exact parameter
// counts; flags cells whose published value deviates beyond tolerance.
// Throws if a benchmark lacks its MHA or SHA reference row.
std::vector<MetricReport> build_report(const std::vector<ScoreRow>& rows);

}  // namespace mhelab::metrics
