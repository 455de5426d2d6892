#pragma once

// Sentence-level lexical reference-based metrics and ingestion of scores
// produced by external metric implementations.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnqe/interchange.hpp"
#include "knnqe/polarity.hpp"

namespace knnqe {

// ---- Text -----------------------------------------------------------------

// UTF-8 to code points; malformed bytes become U+FFFD.
std::u32string decode_utf8(std::string_view text);
std::string encode_utf8(std::u32string_view text);

bool is_unicode_whitespace(char32_t c);
bool is_punctuation(char32_t c);
char32_t to_lower(char32_t c);

// Lowercases, puts every punctuation character in its own token and splits
// on Unicode whitespace.
std::vector<std::u32string> bleu_tokenize(std::string_view text);

// ---- BLEU -----------------------------------------------------------------

inline constexpr int kBleuMaxOrder = 4;

struct BleuStats {
  std::array<std::uint64_t, kBleuMaxOrder> matches{};  // clipped n-gram matches
  std::array<std::uint64_t, kBleuMaxOrder> totals{};   // hypothesis n-grams
  std::uint64_t hyp_length = 0;
  std::uint64_t ref_length = 0;  // closest reference length, shorter on ties
};

BleuStats bleu_stats(std::string_view hypothesis, std::span<const std::string> references);

// Score from sufficient statistics: add-one smoothing for orders >= 2.
double bleu_from_stats(const BleuStats& stats);

double sentence_bleu(std::string_view hypothesis, std::span<const std::string> references);

// ---- chrF -----------------------------------------------------------------

inline constexpr int kChrfMaxOrder = 6;
inline constexpr double kChrfBeta = 2.0;

struct ChrfStats {
  std::array<std::uint64_t, kChrfMaxOrder> matches{};
  std::array<std::uint64_t, kChrfMaxOrder> hyp_totals{};
  std::array<std::uint64_t, kChrfMaxOrder> ref_totals{};
};

ChrfStats chrf_stats(std::string_view hypothesis, std::string_view reference);

// Uniform mean of per-order F-beta. An order where neither side has any
// n-gram is left out; an order where only one side is empty scores 0.
double chrf_from_stats(const ChrfStats& stats);

// Maximum over references.
double sentence_chrf(std::string_view hypothesis, std::span<const std::string> references);

// ---- References -----------------------------------------------------------

enum class RefProvenance { kHuman, kSynthetic };

struct Reference {
  std::string text;
  RefProvenance provenance = RefProvenance::kHuman;
};

struct ReferenceSet {
  std::map<interchange::SegmentKey, std::vector<Reference>> refs;

  // Rejects empty reference strings and empty lists.
  void add(const interchange::SegmentKey& key, std::vector<Reference> references);
};

enum class LexicalMetric { kBleu, kChrf };

std::optional<LexicalMetric> parse_lexical_metric(std::string_view text);
std::string_view to_string(LexicalMetric metric);

// Metric evaluated with only the references at the given indices.
double best_reference_score(LexicalMetric metric, std::string_view hypothesis,
                            std::span<const Reference> references, std::span<const std::size_t> subset);

double reference_score(LexicalMetric metric, std::string_view hypothesis, std::span<const std::string> references);

// ---- External scores ------------------------------------------------------

// Known polarity by metric name, matched case-insensitively with
// punctuation ignored ("MetricX-23" == "metricx23").
std::optional<Polarity> known_polarity(std::string_view metric_name);

// Tags a score table with its metric name and polarity. An explicit
// polarity overrides the lookup; an unknown name without one is an error.
interchange::ScoreFragment ingest_external(std::string_view metric_name, interchange::ScoreFragment table,
                                           std::optional<Polarity> polarity = std::nullopt);

}  // namespace knnqe
