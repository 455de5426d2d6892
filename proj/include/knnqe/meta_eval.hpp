#pragma once

// Ranks QE metrics against human scores and checks how well reference-based
// metrics reproduce that ranking.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnqe/interchange.hpp"
#include "knnqe/ref_metrics.hpp"

namespace knnqe {

// Ranks starting at 1; tied values share the mean of the positions they span.
std::vector<double> average_ranks(std::span<const double> values);

// Both throw InvalidArgument for n < 2 or unequal lengths and DegenerateInput
// for a constant vector.
double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

// Column values with lower_is_better columns negated.
std::vector<double> oriented_column(const interchange::ScoreMatrix& matrix, const std::string& name);

// MG: Spearman of each QE column against the human column.
std::vector<double> gold_ranking(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                                 const std::string& h_name);

// MR_j: same, with a reference-based column in place of the human one.
std::vector<double> auto_ranking(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                                 const std::string& rb_name);

double ranking_performance(std::span<const double> mg, std::span<const double> mr);

double segment_performance(const interchange::ScoreMatrix& matrix, const std::string& rb_name,
                           const std::string& h_name);

enum class GroupBy { kDomain, kSystem };

std::optional<GroupBy> parse_group_by(std::string_view text);
std::string_view to_string(GroupBy group_by);

struct Grouping {
  GroupBy dimension;
  std::string key;
};

struct RankingReport {
  std::vector<std::string> qe_names;
  std::vector<double> mg;
  std::map<std::string, std::vector<double>> mr;
  std::map<std::string, double> ranking_corr;
  std::map<std::string, double> seg_corr;
  std::optional<Grouping> grouping;  // empty for the overall report
  std::size_t segments = 0;
  bool skipped = false;
  std::string skip_reason;
};

// Overall report; every error propagates.
RankingReport ranking_report(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                             std::span<const std::string> rb_names, const std::string& h_name);

// One report per group value (sorted), then the overall report. Groups that
// are too small or degenerate come back flagged as skipped.
std::vector<RankingReport> grouped_report(const interchange::ScoreMatrix& matrix,
                                          std::span<const std::string> qe_names,
                                          std::span<const std::string> rb_names, const std::string& h_name,
                                          GroupBy group_by);

// ---- Reference ablation ---------------------------------------------------

struct AblationPoint {
  std::vector<std::size_t> subset;
  std::vector<double> mr;
  double seg_corr = 0.0;
  double ranking_corr = 0.0;
};

// For each reference subset: rescore every matrix row with the lexical
// metric, rebuild MR and correlate it with MG.
std::vector<AblationPoint> reference_ablation(const std::map<interchange::SegmentKey, std::string>& hypotheses,
                                              const ReferenceSet& references, LexicalMetric metric,
                                              std::span<const std::vector<std::size_t>> subsets,
                                              const interchange::ScoreMatrix& matrix,
                                              std::span<const std::string> qe_names, const std::string& h_name);

}  // namespace knnqe
