#pragma once

// Token- and segment-level quality estimation scores derived from the
// nearest training-data neighbours of each generated token.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnqe/datastore.hpp"
#include "knnqe/interchange.hpp"
#include "knnqe/polarity.hpp"
#include "knnqe/retrieval.hpp"

namespace knnqe {

enum class MetricName {
  kTokenDistance,
  kSentenceSimilarity,
  kDistinctTokens,
  kMatchCount,
  kAvgProbability,
  kEnsemble,
};

struct MetricDescriptor {
  MetricName name;
  std::string_view id;
  Polarity polarity;
  std::size_t default_k;

  friend bool operator==(const MetricDescriptor& a, const MetricDescriptor& b) { return a.name == b.name; }
};

const MetricDescriptor& describe(MetricName name);
std::span<const MetricDescriptor> all_metrics();

// Accepts the full id ("knn_token_distance") or a short alias ("distance").
std::optional<MetricName> parse_metric(std::string_view text);

bool uses_neighbors(MetricName name);

struct QEMetricSeries {
  MetricDescriptor metric;
  std::map<std::string, double> scores;
  std::optional<std::map<std::string, std::vector<double>>> token_scores;
};

// ---- Token metrics ------------------------------------------------------

double token_distance(const NeighborSet& neighbors);

// Mean cosine similarity between the output sentence embedding and the
// embedding of each neighbour's training target sentence, counted once per
// neighbour.
double sentence_similarity(const NeighborSet& neighbors, std::span<const float> query_embedding,
                           const Datastore& store, const interchange::Tensor& embeddings);

double distinct_tokens(const NeighborSet& neighbors);

// Counts neighbours (with multiplicity) whose token equals the model output.
double match_count(const NeighborSet& neighbors, std::uint32_t output_token_id);

double avg_probability(std::span<const double> token_probs);

double aggregate_segment(std::span<const double> token_scores);

double cosine_similarity(std::span<const float> a, std::span<const float> b);

// ---- Corpus scoring -------------------------------------------------------

struct MetricRequest {
  MetricName metric;
  std::size_t k = 0;  // 0 means the metric's default
};

struct ScoringOptions {
  SearchOptions search;
  const IvfIndex* ivf = nullptr;
};

// Scores every test sentence with each requested metric. Retrieval runs once
// with the largest k; smaller k use the sorted prefix. Ensemble requests are
// rejected here; combine finished series with ensemble().
std::vector<QEMetricSeries> score_corpus(const Datastore& store, const interchange::Bundle& test,
                                         std::span<const MetricRequest> requests, const ScoringOptions& options = {});

QEMetricSeries score_corpus(const Datastore& store, const interchange::Bundle& test, MetricName metric,
                            std::size_t k, const ScoringOptions& options = {});

// Polarity-aligned z-score mean. Needs at least two series over the same
// segments; a constant series is an error naming that series.
QEMetricSeries ensemble(std::span<const QEMetricSeries> series);

// Series as a score table. `keys` maps seg_id to (system, domain).
interchange::ScoreFragment to_fragment(const QEMetricSeries& series,
                                       const std::map<std::string, interchange::SegmentKey>& keys);

// Token scores as JSONL, one line per segment:
// {"metric", "seg_id", "score", "token_scores": [...]}.
void write_token_scores(const std::filesystem::path& path, const QEMetricSeries& series);

// The metric comes from the file; `polarity` overrides its declared one.
QEMetricSeries read_token_scores(const std::filesystem::path& path,
                                 std::optional<Polarity> polarity = std::nullopt);

}  // namespace knnqe
