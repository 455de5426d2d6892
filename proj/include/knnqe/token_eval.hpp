#pragma once

// Token-level evaluation of QE scores against binary OK/BAD labels.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "knnqe/qe_metrics.hpp"

namespace knnqe {

// seg_id -> per-token labels, 0 = BAD, 1 = OK.
struct TokenLabelSet {
  std::map<std::string, std::vector<int>> labels;
};

// JSONL lines {"seg_id": ..., "labels": [0, 1, ...]}.
TokenLabelSet read_token_labels(const std::filesystem::path& path);

struct FlatTokens {
  std::vector<double> scores;  // oriented, higher = better
  std::vector<int> labels;
};

// Concatenates labeled segments in seg_id order. Segments without labels are
// skipped; a labeled segment the series lacks, or a length mismatch, is an
// error naming the segment.
FlatTokens flatten_tokens(const QEMetricSeries& series, const TokenLabelSet& labels);

double token_pearson(const QEMetricSeries& series, const TokenLabelSet& labels);

enum class F1Class { kBad, kOk };

std::string_view to_string(F1Class target);

struct F1Result {
  double threshold = 0.0;
  double f1 = 0.0;
};

// Candidate thresholds are -inf, the midpoints between consecutive distinct
// scores, and +inf. BAD is predicted for score < threshold, OK for
// score > threshold. Ties go to the lowest threshold.
F1Result best_f1(std::span<const double> scores, std::span<const int> labels, F1Class target = F1Class::kBad);
F1Result best_f1(const QEMetricSeries& series, const TokenLabelSet& labels, F1Class target = F1Class::kBad);

}  // namespace knnqe
