#include "knnqe/meta_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "knnqe/error.hpp"

namespace knnqe {

namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw InvalidArgument("correlation of vectors with different lengths (" + std::to_string(x.size()) + " and " +
                          std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw InvalidArgument("correlation needs at least two values");
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double correlate(std::span<const double> x, std::span<const double> y, double mx, double my) {
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateInput("correlation of a constant vector is undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

void check_names(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names) {
  if (qe_names.empty()) throw InvalidArgument("no QE metrics given");
  for (const auto& n : qe_names) matrix.column_index(n);
}

std::vector<double> rank_against(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                                 std::span<const double> target) {
  std::vector<double> out;
  out.reserve(qe_names.size());
  for (const auto& name : qe_names) {
    try {
      out.push_back(spearman(oriented_column(matrix, name), target));
    } catch (const DegenerateInput&) {
      throw DegenerateInput("column '" + name + "' is constant; its correlation is undefined");
    }
  }
  return out;
}

std::vector<double> target_column(const interchange::ScoreMatrix& matrix, const std::string& name) {
  auto col = oriented_column(matrix, name);
  if (std::adjacent_find(col.begin(), col.end(), std::not_equal_to<>()) == col.end()) {
    throw DegenerateInput("column '" + name + "' is constant; its correlation is undefined");
  }
  return col;
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    // positions i+1 .. j, mean is (i + 1 + j) / 2
    const double r = static_cast<double>(i + 1 + j) / 2.0;
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = r;
    i = j;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw InvalidArgument("correlation input is not finite");
  }
  return correlate(x, y, mean(x), mean(y));
}

double spearman(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) throw InvalidArgument("correlation input is NaN");
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  // Ranks are half-integers, so every sum below is exact and the result does
  // not depend on element order.
  const double m = static_cast<double>(x.size() + 1) / 2.0;
  return correlate(rx, ry, m, m);
}

std::vector<double> oriented_column(const interchange::ScoreMatrix& matrix, const std::string& name) {
  const std::size_t c = matrix.column_index(name);
  std::vector<double> out(matrix.columns[c].begin(), matrix.columns[c].end());
  if (matrix.polarity[c] == Polarity::kLowerIsBetter) {
    for (double& v : out) v = -v;
  }
  return out;
}

std::vector<double> gold_ranking(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                                 const std::string& h_name) {
  check_names(matrix, qe_names);
  return rank_against(matrix, qe_names, target_column(matrix, h_name));
}

std::vector<double> auto_ranking(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                                 const std::string& rb_name) {
  check_names(matrix, qe_names);
  return rank_against(matrix, qe_names, target_column(matrix, rb_name));
}

double ranking_performance(std::span<const double> mg, std::span<const double> mr) {
  if (mg.size() < 2) throw InvalidArgument("ranking needs at least two QE metrics");
  try {
    return spearman(mr, mg);
  } catch (const DegenerateInput&) {
    throw DegenerateInput("QE ranking is undefined: MG or MR is constant across metrics");
  }
}

double segment_performance(const interchange::ScoreMatrix& matrix, const std::string& rb_name,
                           const std::string& h_name) {
  return spearman(target_column(matrix, rb_name), target_column(matrix, h_name));
}

std::optional<GroupBy> parse_group_by(std::string_view text) {
  if (text == "domain") return GroupBy::kDomain;
  if (text == "system") return GroupBy::kSystem;
  return std::nullopt;
}

std::string_view to_string(GroupBy group_by) { return group_by == GroupBy::kDomain ? "domain" : "system"; }

RankingReport ranking_report(const interchange::ScoreMatrix& matrix, std::span<const std::string> qe_names,
                             std::span<const std::string> rb_names, const std::string& h_name) {
  if (qe_names.size() < 2) throw InvalidArgument("ranking needs at least two QE metrics");
  if (rb_names.empty()) throw InvalidArgument("no reference-based metrics given");
  RankingReport report;
  report.qe_names.assign(qe_names.begin(), qe_names.end());
  report.segments = matrix.rows();
  report.mg = gold_ranking(matrix, qe_names, h_name);
  for (const auto& rb : rb_names) {
    auto mr = auto_ranking(matrix, qe_names, rb);
    report.ranking_corr[rb] = ranking_performance(report.mg, mr);
    report.seg_corr[rb] = segment_performance(matrix, rb, h_name);
    report.mr[rb] = std::move(mr);
  }
  return report;
}

std::vector<RankingReport> grouped_report(const interchange::ScoreMatrix& matrix,
                                          std::span<const std::string> qe_names,
                                          std::span<const std::string> rb_names, const std::string& h_name,
                                          GroupBy group_by) {
  // Name checks up front so that a typo is an error, not a skipped group.
  check_names(matrix, qe_names);
  for (const auto& rb : rb_names) matrix.column_index(rb);
  matrix.column_index(h_name);

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < matrix.rows(); ++r) {
    const auto& key = matrix.keys[r];
    groups[group_by == GroupBy::kDomain ? key.domain : key.system].push_back(r);
  }

  std::vector<RankingReport> out;
  for (const auto& [value, rows] : groups) {
    const auto sub = matrix.select_rows(rows);
    RankingReport report;
    try {
      report = ranking_report(sub, qe_names, rb_names, h_name);
    } catch (const DegenerateInput& e) {
      report.skipped = true;
      report.skip_reason = e.what();
    } catch (const InvalidArgument& e) {
      report.skipped = true;
      report.skip_reason = e.what();
    }
    if (report.skipped) {
      report.qe_names.assign(qe_names.begin(), qe_names.end());
      report.segments = rows.size();
    }
    report.grouping = Grouping{group_by, value};
    out.push_back(std::move(report));
  }
  out.push_back(ranking_report(matrix, qe_names, rb_names, h_name));
  return out;
}

std::vector<AblationPoint> reference_ablation(const std::map<interchange::SegmentKey, std::string>& hypotheses,
                                              const ReferenceSet& references, LexicalMetric metric,
                                              std::span<const std::vector<std::size_t>> subsets,
                                              const interchange::ScoreMatrix& matrix,
                                              std::span<const std::string> qe_names, const std::string& h_name) {
  if (subsets.empty()) throw InvalidArgument("no reference subsets given");
  if (qe_names.size() < 2) throw InvalidArgument("ranking needs at least two QE metrics");
  const auto mg = gold_ranking(matrix, qe_names, h_name);
  const auto h = target_column(matrix, h_name);

  std::vector<AblationPoint> out;
  for (const auto& subset : subsets) {
    std::vector<double> rb;
    rb.reserve(matrix.rows());
    for (const auto& key : matrix.keys) {
      auto hyp = hypotheses.find(key);
      if (hyp == hypotheses.end()) throw DataError("no hypothesis for segment " + interchange::to_string(key));
      auto refs = references.refs.find(key);
      if (refs == references.refs.end()) throw DataError("no references for segment " + interchange::to_string(key));
      rb.push_back(best_reference_score(metric, hyp->second, refs->second, subset));
    }
    if (std::adjacent_find(rb.begin(), rb.end(), std::not_equal_to<>()) == rb.end()) {
      throw DegenerateInput("reference-based scores are constant for this reference subset");
    }
    AblationPoint point;
    point.subset = subset;
    for (const auto& name : qe_names) point.mr.push_back(spearman(oriented_column(matrix, name), rb));
    point.seg_corr = spearman(rb, h);
    point.ranking_corr = ranking_performance(mg, point.mr);
    out.push_back(std::move(point));
  }
  return out;
}

}  // namespace knnqe
