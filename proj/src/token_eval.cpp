#include "knnqe/token_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "knnqe/error.hpp"
#include "knnqe/interchange.hpp"
#include "knnqe/meta_eval.hpp"

namespace knnqe {

using nlohmann::json;

TokenLabelSet read_token_labels(const std::filesystem::path& path) {
  const auto resolved = interchange::resolve_input_path(path);
  std::ifstream in(resolved);
  if (!in) throw IoError("cannot open label file '" + resolved.string() + "'");
  TokenLabelSet out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = resolved.filename().string() + " line " + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error&) {
      throw ValidationError(where + ": malformed JSON");
    }
    if (!obj.is_object() || !obj.contains("seg_id") || !obj.contains("labels") || !obj["labels"].is_array()) {
      throw ValidationError(where + ": expected {\"seg_id\", \"labels\": [...]}");
    }
    std::string seg;
    if (obj["seg_id"].is_string()) {
      seg = obj["seg_id"].get<std::string>();
    } else if (obj["seg_id"].is_number_integer()) {
      seg = std::to_string(obj["seg_id"].get<long long>());
    } else {
      throw ValidationError(where + ": seg_id must be a string or integer");
    }
    std::vector<int> labels;
    for (const auto& v : obj["labels"]) {
      if (!v.is_number_integer() || (v.get<long long>() != 0 && v.get<long long>() != 1)) {
        throw ValidationError(where + ": labels must be 0 (BAD) or 1 (OK)");
      }
      labels.push_back(v.get<int>());
    }
    if (!out.labels.emplace(seg, std::move(labels)).second) {
      throw ValidationError(where + ": duplicate seg_id '" + seg + "'");
    }
  }
  return out;
}

FlatTokens flatten_tokens(const QEMetricSeries& series, const TokenLabelSet& labels) {
  if (!series.token_scores) {
    throw InvalidArgument("series '" + std::string(series.metric.id) + "' has no token-level scores");
  }
  const double sign = orientation_sign(series.metric.polarity);
  FlatTokens flat;
  for (const auto& [seg, seg_labels] : labels.labels) {
    auto it = series.token_scores->find(seg);
    if (it == series.token_scores->end()) throw DataError("segment '" + seg + "' has labels but no token scores");
    if (it->second.size() != seg_labels.size()) {
      throw DataError("segment '" + seg + "': " + std::to_string(seg_labels.size()) + " labels for " +
                      std::to_string(it->second.size()) + " tokens");
    }
    for (std::size_t i = 0; i < seg_labels.size(); ++i) {
      flat.scores.push_back(sign * it->second[i]);
      flat.labels.push_back(seg_labels[i]);
    }
  }
  return flat;
}

double token_pearson(const QEMetricSeries& series, const TokenLabelSet& labels) {
  const auto flat = flatten_tokens(series, labels);
  const std::vector<double> y(flat.labels.begin(), flat.labels.end());
  try {
    return pearson(flat.scores, y);
  } catch (const DegenerateInput&) {
    throw DegenerateInput("token Pearson is undefined: scores or labels are constant");
  }
}

std::string_view to_string(F1Class target) { return target == F1Class::kBad ? "bad" : "ok"; }

F1Result best_f1(std::span<const double> scores, std::span<const int> labels, F1Class target) {
  if (scores.size() != labels.size()) throw InvalidArgument("scores and labels differ in length");
  std::size_t bad_total = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw InvalidArgument("token score is NaN");
    if (labels[i] != 0 && labels[i] != 1) throw InvalidArgument("labels must be 0 or 1");
    bad_total += labels[i] == 0;
  }
  const std::size_t ok_total = labels.size() - bad_total;
  if (bad_total == 0 || ok_total == 0) throw DegenerateInput("best F1 needs both BAD and OK tokens");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  auto f1_of = [&](std::size_t bad_below, std::size_t ok_below) {
    std::size_t tp, fp, fn;
    if (target == F1Class::kBad) {
      tp = bad_below;
      fp = ok_below;
      fn = bad_total - bad_below;
    } else {
      tp = ok_total - ok_below;
      fp = bad_total - bad_below;
      fn = ok_below;
    }
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  };

  // Candidate thresholds in increasing order; the first maximum wins.
  F1Result best{-std::numeric_limits<double>::infinity(), f1_of(0, 0)};
  std::size_t bad_below = 0, ok_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double v = scores[order[i]];
    while (i < order.size() && scores[order[i]] == v) {
      (labels[order[i]] == 0 ? bad_below : ok_below) += 1;
      ++i;
    }
    const double threshold =
        i < order.size() ? std::midpoint(v, scores[order[i]]) : std::numeric_limits<double>::infinity();
    const double f1 = f1_of(bad_below, ok_below);
    if (f1 > best.f1) best = {threshold, f1};
  }
  return best;
}

F1Result best_f1(const QEMetricSeries& series, const TokenLabelSet& labels, F1Class target) {
  const auto flat = flatten_tokens(series, labels);
  return best_f1(flat.scores, flat.labels, target);
}

}  // namespace knnqe
