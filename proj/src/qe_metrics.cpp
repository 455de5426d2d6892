#include "knnqe/qe_metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "knnqe/error.hpp"
#include "mapped_file.hpp"

namespace knnqe {

namespace {

constexpr std::array<MetricDescriptor, 6> kMetrics = {{
    {MetricName::kTokenDistance, "knn_token_distance", Polarity::kLowerIsBetter, 1},
    {MetricName::kSentenceSimilarity, "knn_sentence_similarity", Polarity::kHigherIsBetter, 1},
    {MetricName::kDistinctTokens, "knn_distinct_tokens", Polarity::kLowerIsBetter, 10},
    {MetricName::kMatchCount, "knn_match_count", Polarity::kHigherIsBetter, 10},
    {MetricName::kAvgProbability, "avg_probability", Polarity::kHigherIsBetter, 1},
    {MetricName::kEnsemble, "ensemble", Polarity::kHigherIsBetter, 1},
}};

void require_neighbors(std::span<const Neighbor> n) {
  if (n.empty()) throw InvalidArgument("empty neighbour set");
}

double mean(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double distance_of(std::span<const Neighbor> n) {
  require_neighbors(n);
  double s = 0.0;
  for (const auto& x : n) s += x.distance;
  return s / static_cast<double>(n.size());
}

double similarity_of(std::span<const Neighbor> n, std::span<const float> query_embedding, const Datastore& store,
                     const interchange::Tensor& embeddings) {
  require_neighbors(n);
  double s = 0.0;
  for (const auto& x : n) {
    const auto row = store.get_sentence(x.sentence_idx).embedding_row;
    if (row >= embeddings.count()) {
      throw DataError("no embedding row " + std::to_string(row) + " for training sentence '" +
                      store.get_sentence(x.sentence_idx).sentence_id + "'");
    }
    s += cosine_similarity(query_embedding, embeddings.row(row));
  }
  return s / static_cast<double>(n.size());
}

double distinct_of(std::span<const Neighbor> n) {
  require_neighbors(n);
  std::unordered_set<std::uint32_t> ids;
  for (const auto& x : n) ids.insert(x.token_id);
  return static_cast<double>(ids.size());
}

double match_of(std::span<const Neighbor> n, std::uint32_t output_token_id) {
  require_neighbors(n);
  return static_cast<double>(
      std::count_if(n.begin(), n.end(), [output_token_id](const Neighbor& x) { return x.token_id == output_token_id; }));
}

}  // namespace

const MetricDescriptor& describe(MetricName name) {
  for (const auto& m : kMetrics) {
    if (m.name == name) return m;
  }
  throw InvalidArgument("unknown metric");
}

std::span<const MetricDescriptor> all_metrics() { return kMetrics; }

std::optional<MetricName> parse_metric(std::string_view text) {
  for (const auto& m : kMetrics) {
    if (m.id == text) return m.name;
  }
  if (text == "distance") return MetricName::kTokenDistance;
  if (text == "similarity") return MetricName::kSentenceSimilarity;
  if (text == "distinct" || text == "distinct_tokens") return MetricName::kDistinctTokens;
  if (text == "match" || text == "match_count") return MetricName::kMatchCount;
  if (text == "probability" || text == "prob") return MetricName::kAvgProbability;
  return std::nullopt;
}

bool uses_neighbors(MetricName name) {
  return name != MetricName::kAvgProbability && name != MetricName::kEnsemble;
}

double token_distance(const NeighborSet& neighbors) { return distance_of(neighbors.neighbors); }

double sentence_similarity(const NeighborSet& neighbors, std::span<const float> query_embedding,
                           const Datastore& store, const interchange::Tensor& embeddings) {
  return similarity_of(neighbors.neighbors, query_embedding, store, embeddings);
}

double distinct_tokens(const NeighborSet& neighbors) { return distinct_of(neighbors.neighbors); }

double match_count(const NeighborSet& neighbors, std::uint32_t output_token_id) {
  return match_of(neighbors.neighbors, output_token_id);
}

double avg_probability(std::span<const double> token_probs) {
  if (token_probs.empty()) throw InvalidArgument("avg_probability of an empty segment");
  for (double p : token_probs) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw InvalidArgument("token probability " + interchange::format_double(p) + " outside [0, 1]");
    }
  }
  return mean(token_probs);
}

double aggregate_segment(std::span<const double> token_scores) {
  if (token_scores.empty()) throw InvalidArgument("cannot aggregate an empty segment");
  return mean(token_scores);
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw InvalidArgument("embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DataError("cosine similarity of a zero-norm embedding is undefined");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::vector<QEMetricSeries> score_corpus(const Datastore& store, const interchange::Bundle& test,
                                         std::span<const MetricRequest> requests, const ScoringOptions& options) {
  if (requests.empty()) throw InvalidArgument("no metrics requested");
  std::size_t k_max = 0;
  std::vector<std::size_t> ks;
  for (const auto& r : requests) {
    if (r.metric == MetricName::kEnsemble) {
      throw InvalidArgument("ensemble is computed from finished series, not scored directly");
    }
    const std::size_t k = r.k == 0 ? describe(r.metric).default_k : r.k;
    ks.push_back(k);
    if (uses_neighbors(r.metric)) k_max = std::max(k_max, k);
    if (r.metric == MetricName::kSentenceSimilarity) {
      if (!test.embeddings) throw InvalidArgument("knn_sentence_similarity needs test-side sentence embeddings");
      if (store.embeddings() == nullptr) {
        throw InvalidArgument("knn_sentence_similarity needs a datastore built with sentence embeddings");
      }
      if (test.embeddings->dim() != store.embeddings()->dim()) {
        throw InvalidArgument("test and datastore sentence embeddings have different dimensions");
      }
    }
  }
  if (test.vectors.dim() != store.dim()) {
    throw InvalidArgument("test vectors have dimension " + std::to_string(test.vectors.dim()) +
                          " but the datastore has " + std::to_string(store.dim()));
  }

  std::vector<NeighborSet> neighbors;
  if (k_max > 0) {
    const Searcher searcher(store, options.ivf);
    neighbors = searcher.search_batch(rows_of(test.vectors), k_max, options.search);
  }

  std::vector<QEMetricSeries> out;
  out.reserve(requests.size());
  for (std::size_t r = 0; r < requests.size(); ++r) {
    const MetricName metric = requests[r].metric;
    const std::size_t k = ks[r];
    QEMetricSeries series{describe(metric), {}, std::map<std::string, std::vector<double>>{}};
    for (std::size_t s = 0; s < test.sentences.size(); ++s) {
      const auto& sent = test.sentences[s];
      std::vector<double> tokens;
      if (metric == MetricName::kAvgProbability) {
        if (!sent.token_probs) {
          throw DataError("sentence '" + sent.sentence_id + "' has no token_probs for avg_probability");
        }
        tokens = *sent.token_probs;
        series.scores[sent.sentence_id] = avg_probability(tokens);
      } else {
        tokens.reserve(sent.token_ids.size());
        for (std::size_t j = 0; j < sent.token_ids.size(); ++j) {
          const auto& all = neighbors[sent.vec_row_start + j].neighbors;
          const std::span<const Neighbor> nk(all.data(), std::min(k, all.size()));
          switch (metric) {
            case MetricName::kTokenDistance:
              tokens.push_back(distance_of(nk));
              break;
            case MetricName::kSentenceSimilarity:
              tokens.push_back(similarity_of(nk, test.embeddings->row(sent.embedding_row), store, *store.embeddings()));
              break;
            case MetricName::kDistinctTokens:
              tokens.push_back(distinct_of(nk));
              break;
            case MetricName::kMatchCount:
              tokens.push_back(match_of(nk, static_cast<std::uint32_t>(sent.token_ids[j])));
              break;
            default:
              throw InvalidArgument("unsupported metric");
          }
        }
        series.scores[sent.sentence_id] = aggregate_segment(tokens);
      }
      (*series.token_scores)[sent.sentence_id] = std::move(tokens);
    }
    out.push_back(std::move(series));
  }
  return out;
}

QEMetricSeries score_corpus(const Datastore& store, const interchange::Bundle& test, MetricName metric, std::size_t k,
                            const ScoringOptions& options) {
  const MetricRequest req[] = {{metric, k}};
  return std::move(score_corpus(store, test, req, options)[0]);
}

QEMetricSeries ensemble(std::span<const QEMetricSeries> series) {
  if (series.size() < 2) throw InvalidArgument("ensemble needs at least two series");
  const auto& first = series[0].scores;
  for (const auto& s : series) {
    bool same = s.scores.size() == first.size() &&
                std::equal(s.scores.begin(), s.scores.end(), first.begin(),
                           [](const auto& a, const auto& b) { return a.first == b.first; });
    if (!same) {
      throw InvalidArgument("series '" + std::string(s.metric.id) + "' covers a different segment set");
    }
  }

  QEMetricSeries out{describe(MetricName::kEnsemble), {}, std::nullopt};
  for (const auto& [seg, _] : first) out.scores[seg] = 0.0;
  const double n = static_cast<double>(first.size());
  for (const auto& s : series) {
    const double sign = orientation_sign(s.metric.polarity);
    double mu = 0.0;
    for (const auto& [_, v] : s.scores) mu += sign * v;
    mu /= n;
    double var = 0.0;
    for (const auto& [_, v] : s.scores) var += (sign * v - mu) * (sign * v - mu);
    const double sd = std::sqrt(var / n);
    if (!(sd > 0.0)) {
      throw DegenerateInput("series '" + std::string(s.metric.id) + "' is constant; cannot z-normalise");
    }
    for (const auto& [seg, v] : s.scores) out.scores[seg] += (sign * v - mu) / sd;
  }
  for (auto& [_, v] : out.scores) v /= static_cast<double>(series.size());
  return out;
}

interchange::ScoreFragment to_fragment(const QEMetricSeries& series,
                                       const std::map<std::string, interchange::SegmentKey>& keys) {
  interchange::ScoreFragment frag;
  frag.name = std::string(series.metric.id);
  frag.polarity = series.metric.polarity;
  for (const auto& [seg, score] : series.scores) {
    auto it = keys.find(seg);
    if (it == keys.end()) throw InvalidArgument("no (system, domain) for segment '" + seg + "'");
    frag.scores.emplace(it->second, score);
  }
  return frag;
}

void write_token_scores(const std::filesystem::path& path, const QEMetricSeries& series) {
  std::string text;
  for (const auto& [seg, score] : series.scores) {
    nlohmann::json line = {{"metric", series.metric.id}, {"seg_id", seg}, {"score", score}};
    if (series.token_scores) {
      auto it = series.token_scores->find(seg);
      line["token_scores"] = it == series.token_scores->end() ? std::vector<double>{} : it->second;
    }
    text += line.dump();
    text += '\n';
  }
  detail::write_file(path, text);
}

QEMetricSeries read_token_scores(const std::filesystem::path& path, std::optional<Polarity> polarity) {
  const auto resolved = interchange::resolve_input_path(path);
  std::ifstream in(resolved);
  if (!in) throw IoError("cannot open token score file '" + resolved.string() + "'");
  std::optional<QEMetricSeries> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = resolved.filename().string() + " line " + std::to_string(line_no);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw ValidationError(where + ": malformed JSON");
    }
    if (!obj.is_object() || !obj.contains("metric") || !obj["metric"].is_string() || !obj.contains("seg_id") ||
        !obj["seg_id"].is_string() || !obj.contains("score") || !obj["score"].is_number()) {
      throw ValidationError(where + ": expected {\"metric\", \"seg_id\", \"score\", \"token_scores\"}");
    }
    const auto name = parse_metric(obj["metric"].get<std::string>());
    if (!name) throw ValidationError(where + ": unknown metric '" + obj["metric"].get<std::string>() + "'");
    if (!out) {
      out = QEMetricSeries{describe(*name), {}, std::map<std::string, std::vector<double>>{}};
      if (polarity) out->metric.polarity = *polarity;
    } else if (out->metric.name != *name) {
      throw ValidationError(where + ": mixes metrics in one file");
    }
    const auto seg = obj["seg_id"].get<std::string>();
    if (!out->scores.emplace(seg, obj["score"].get<double>()).second) {
      throw ValidationError(where + ": duplicate seg_id '" + seg + "'");
    }
    std::vector<double> tokens;
    if (obj.contains("token_scores")) {
      if (!obj["token_scores"].is_array()) throw ValidationError(where + ": token_scores must be an array");
      for (const auto& v : obj["token_scores"]) {
        if (!v.is_number()) throw ValidationError(where + ": token_scores must be numbers");
        tokens.push_back(v.get<double>());
      }
    }
    (*out->token_scores)[seg] = std::move(tokens);
  }
  if (!out) throw ValidationError(resolved.filename().string() + ": no segments");
  return std::move(*out);
}

}  // namespace knnqe
