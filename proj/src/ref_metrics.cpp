#include "knnqe/ref_metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>

#include "knnqe/error.hpp"

namespace knnqe {

// ---- Text -------------------------------------------------------------------

std::u32string decode_utf8(std::string_view text) {
  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto b0 = static_cast<unsigned char>(text[i]);
    char32_t cp = 0xFFFD;
    std::size_t len = 1;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
    }
    if (len > 1) {
      bool ok = i + len <= text.size();
      char32_t v = b0 & (0x7F >> len);
      for (std::size_t j = 1; ok && j < len; ++j) {
        const auto b = static_cast<unsigned char>(text[i + j]);
        if ((b & 0xC0) != 0x80) {
          ok = false;
        } else {
          v = (v << 6) | (b & 0x3F);
        }
      }
      static constexpr char32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
      if (ok && v >= kMin[len] && v <= 0x10FFFF && !(v >= 0xD800 && v <= 0xDFFF)) {
        cp = v;
      } else {
        len = 1;
        cp = 0xFFFD;
      }
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string encode_utf8(std::u32string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t c : text) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (c >> 12)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (c >> 18)));
      out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

bool is_unicode_whitespace(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

bool is_punctuation(char32_t c) {
  if (c < 0x80) return c > 0x20 && c < 0x7F && !std::isalnum(static_cast<int>(c));
  if (c >= 0xA1 && c <= 0xBF) {
    // Latin-1 symbols, minus superscripts, fractions and the ordinal/micro letters.
    return !(c == 0xAA || c == 0xB2 || c == 0xB3 || c == 0xB5 || c == 0xB9 || c == 0xBA ||
             (c >= 0xBC && c <= 0xBE));
  }
  if (c == 0xD7 || c == 0xF7) return true;
  if ((c >= 0x2010 && c <= 0x2027) || (c >= 0x2030 && c <= 0x205E)) return true;
  if ((c >= 0x3001 && c <= 0x3003) || (c >= 0x3008 && c <= 0x3011) || (c >= 0x3014 && c <= 0x301F)) return true;
  if ((c >= 0xFF01 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) || (c >= 0xFF3B && c <= 0xFF40) ||
      (c >= 0xFF5B && c <= 0xFF65)) {
    return true;
  }
  return false;
}

char32_t to_lower(char32_t c) {
  if (c >= 'A' && c <= 'Z') return c + 32;
  if (c < 0xC0) return c;
  if (c <= 0xDE) return c == 0xD7 ? c : c + 32;
  if (c >= 0x100 && c <= 0x17F) {
    if (c == 0x130) return U'i';
    if (c == 0x178) return 0xFF;
    if ((c >= 0x100 && c <= 0x12F) || (c >= 0x132 && c <= 0x137) || (c >= 0x14A && c <= 0x177)) {
      return (c % 2 == 0) ? c + 1 : c;
    }
    if ((c >= 0x139 && c <= 0x148) || (c >= 0x179 && c <= 0x17E)) return (c % 2 == 1) ? c + 1 : c;
    return c;
  }
  if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 32;
  if (c == 0x386) return 0x3AC;
  if (c >= 0x388 && c <= 0x38A) return c + 37;
  if (c == 0x38C) return 0x3CC;
  if (c == 0x38E || c == 0x38F) return c + 63;
  if (c >= 0x410 && c <= 0x42F) return c + 32;
  if (c >= 0x400 && c <= 0x40F) return c + 80;
  return c;
}

std::vector<std::u32string> bleu_tokenize(std::string_view text) {
  std::vector<std::u32string> tokens;
  std::u32string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char32_t c : decode_utf8(text)) {
    if (is_unicode_whitespace(c)) {
      flush();
    } else if (is_punctuation(c)) {
      flush();
      tokens.emplace_back(1, c);
    } else {
      current.push_back(to_lower(c));
    }
  }
  flush();
  return tokens;
}

// ---- BLEU -------------------------------------------------------------------

namespace {

using Ngram = std::vector<std::size_t>;
using NgramCounts = std::map<Ngram, std::uint64_t>;

class Vocabulary {
 public:
  std::vector<std::size_t> encode(const std::vector<std::u32string>& tokens) {
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(ids_.try_emplace(t, ids_.size()).first->second);
    return ids;
  }

 private:
  std::map<std::u32string, std::size_t> ids_;
};

NgramCounts count_ngrams(const std::vector<std::size_t>& ids, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= ids.size(); ++i) {
    ++counts[Ngram(ids.begin() + static_cast<std::ptrdiff_t>(i), ids.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuStats bleu_stats(std::string_view hypothesis, std::span<const std::string> references) {
  if (references.empty()) throw InvalidArgument("BLEU needs at least one reference");
  Vocabulary vocab;
  const auto hyp = vocab.encode(bleu_tokenize(hypothesis));
  if (hyp.empty()) throw InvalidArgument("BLEU hypothesis is empty after tokenisation");
  std::vector<std::vector<std::size_t>> refs;
  for (const auto& r : references) {
    refs.push_back(vocab.encode(bleu_tokenize(r)));
    if (refs.back().empty()) throw InvalidArgument("BLEU reference is empty after tokenisation");
  }

  BleuStats stats;
  stats.hyp_length = hyp.size();
  stats.ref_length = refs[0].size();
  for (const auto& r : refs) {
    const auto diff = [&](std::uint64_t len) {
      return len > stats.hyp_length ? len - stats.hyp_length : stats.hyp_length - len;
    };
    if (diff(r.size()) < diff(stats.ref_length) || (diff(r.size()) == diff(stats.ref_length) && r.size() < stats.ref_length)) {
      stats.ref_length = r.size();
    }
  }

  for (std::size_t n = 1; n <= kBleuMaxOrder; ++n) {
    const NgramCounts hyp_counts = count_ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [gram, c] : count_ngrams(r, n)) {
        auto& slot = max_ref[gram];
        slot = std::max(slot, c);
      }
    }
    std::uint64_t matched = 0;
    for (const auto& [gram, c] : hyp_counts) {
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    stats.matches[n - 1] = matched;
    stats.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return stats;
}

double bleu_from_stats(const BleuStats& stats) {
  if (stats.totals[0] == 0 || stats.hyp_length == 0) throw InvalidArgument("BLEU of an empty hypothesis");
  if (stats.matches[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(stats.matches[0]) / static_cast<double>(stats.totals[0]));
  for (std::size_t n = 1; n < kBleuMaxOrder; ++n) {
    log_sum += std::log((static_cast<double>(stats.matches[n]) + 1.0) / (static_cast<double>(stats.totals[n]) + 1.0));
  }
  const double c = static_cast<double>(stats.hyp_length);
  const double r = static_cast<double>(stats.ref_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return std::clamp(bp * std::exp(log_sum / kBleuMaxOrder), 0.0, 1.0);
}

double sentence_bleu(std::string_view hypothesis, std::span<const std::string> references) {
  return bleu_from_stats(bleu_stats(hypothesis, references));
}

// ---- chrF -------------------------------------------------------------------

namespace {

std::u32string strip_whitespace(std::string_view text) {
  std::u32string out;
  for (char32_t c : decode_utf8(text)) {
    if (!is_unicode_whitespace(c)) out.push_back(c);
  }
  return out;
}

std::map<std::u32string_view, std::uint64_t> char_ngrams(const std::u32string& s, std::size_t n) {
  std::map<std::u32string_view, std::uint64_t> counts;
  const std::u32string_view view(s);
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[view.substr(i, n)];
  return counts;
}

}  // namespace

ChrfStats chrf_stats(std::string_view hypothesis, std::string_view reference) {
  const std::u32string hyp = strip_whitespace(hypothesis);
  const std::u32string ref = strip_whitespace(reference);
  ChrfStats stats;
  for (std::size_t n = 1; n <= kChrfMaxOrder; ++n) {
    const auto h = char_ngrams(hyp, n);
    const auto r = char_ngrams(ref, n);
    std::uint64_t matched = 0;
    for (const auto& [gram, c] : h) {
      auto it = r.find(gram);
      if (it != r.end()) matched += std::min(c, it->second);
    }
    stats.matches[n - 1] = matched;
    stats.hyp_totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
    stats.ref_totals[n - 1] = ref.size() >= n ? ref.size() - n + 1 : 0;
  }
  return stats;
}

double chrf_from_stats(const ChrfStats& stats) {
  constexpr double beta2 = kChrfBeta * kChrfBeta;
  double sum = 0.0;
  int orders = 0;
  for (std::size_t n = 0; n < kChrfMaxOrder; ++n) {
    if (stats.hyp_totals[n] == 0 && stats.ref_totals[n] == 0) continue;
    ++orders;
    if (stats.matches[n] == 0) continue;
    const double p = static_cast<double>(stats.matches[n]) / static_cast<double>(stats.hyp_totals[n]);
    const double r = static_cast<double>(stats.matches[n]) / static_cast<double>(stats.ref_totals[n]);
    sum += (1.0 + beta2) * p * r / (beta2 * p + r);
  }
  if (orders == 0) throw InvalidArgument("chrF of two strings that are empty after whitespace removal");
  return std::clamp(sum / orders, 0.0, 1.0);
}

double sentence_chrf(std::string_view hypothesis, std::span<const std::string> references) {
  if (hypothesis.empty()) throw InvalidArgument("chrF hypothesis is empty");
  if (references.empty()) throw InvalidArgument("chrF needs at least one reference");
  double best = 0.0;
  for (const auto& r : references) {
    if (r.empty()) throw InvalidArgument("chrF reference is empty");
    best = std::max(best, chrf_from_stats(chrf_stats(hypothesis, r)));
  }
  return best;
}

// ---- References -------------------------------------------------------------

void ReferenceSet::add(const interchange::SegmentKey& key, std::vector<Reference> references) {
  if (references.empty()) throw InvalidArgument("segment " + interchange::to_string(key) + " has no references");
  for (const auto& r : references) {
    if (r.text.empty()) throw InvalidArgument("segment " + interchange::to_string(key) + " has an empty reference");
  }
  refs[key] = std::move(references);
}

std::optional<LexicalMetric> parse_lexical_metric(std::string_view text) {
  if (text == "bleu") return LexicalMetric::kBleu;
  if (text == "chrf") return LexicalMetric::kChrf;
  return std::nullopt;
}

std::string_view to_string(LexicalMetric metric) { return metric == LexicalMetric::kBleu ? "bleu" : "chrf"; }

double reference_score(LexicalMetric metric, std::string_view hypothesis, std::span<const std::string> references) {
  return metric == LexicalMetric::kBleu ? sentence_bleu(hypothesis, references)
                                        : sentence_chrf(hypothesis, references);
}

double best_reference_score(LexicalMetric metric, std::string_view hypothesis, std::span<const Reference> references,
                            std::span<const std::size_t> subset) {
  if (subset.empty()) throw InvalidArgument("reference subset is empty");
  std::vector<std::string> chosen;
  chosen.reserve(subset.size());
  for (std::size_t i : subset) {
    if (i >= references.size()) {
      throw InvalidArgument("reference index " + std::to_string(i) + " out of range (" +
                            std::to_string(references.size()) + " references)");
    }
    chosen.push_back(references[i].text);
  }
  return reference_score(metric, hypothesis, chosen);
}

// ---- External scores --------------------------------------------------------

namespace {

std::string normalise_name(std::string_view name) {
  std::string out;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

}  // namespace

std::optional<Polarity> known_polarity(std::string_view metric_name) {
  static const std::map<std::string, Polarity> kKnown = {
      {"ter", Polarity::kLowerIsBetter},
      {"knntokendistance", Polarity::kLowerIsBetter},
      {"knndistincttokens", Polarity::kLowerIsBetter},
      {"bleu", Polarity::kHigherIsBetter},
      {"chrf", Polarity::kHigherIsBetter},
      {"bertscore", Polarity::kHigherIsBetter},
      {"bleurt", Polarity::kHigherIsBetter},
      {"bleurt20", Polarity::kHigherIsBetter},
      {"unite", Polarity::kHigherIsBetter},
      {"unitemup", Polarity::kHigherIsBetter},
      {"comet", Polarity::kHigherIsBetter},
      {"comet22", Polarity::kHigherIsBetter},
      {"xcomet", Polarity::kHigherIsBetter},
      {"xcometxl", Polarity::kHigherIsBetter},
      {"metricx", Polarity::kHigherIsBetter},
      {"metricx23", Polarity::kHigherIsBetter},
      {"metricx23xl", Polarity::kHigherIsBetter},
      {"cometkiwi", Polarity::kHigherIsBetter},
      {"knnsentencesimilarity", Polarity::kHigherIsBetter},
      {"knnmatchcount", Polarity::kHigherIsBetter},
      {"avgprobability", Polarity::kHigherIsBetter},
      {"ensemble", Polarity::kHigherIsBetter},
      {"human", Polarity::kHigherIsBetter},
      {"mqm", Polarity::kHigherIsBetter},
      {"da", Polarity::kHigherIsBetter},
  };
  auto it = kKnown.find(normalise_name(metric_name));
  if (it == kKnown.end()) return std::nullopt;
  return it->second;
}

interchange::ScoreFragment ingest_external(std::string_view metric_name, interchange::ScoreFragment table,
                                           std::optional<Polarity> polarity) {
  if (!polarity) polarity = known_polarity(metric_name);
  if (!polarity) {
    throw InvalidArgument("unknown metric '" + std::string(metric_name) +
                          "': declare its polarity (higher or lower) explicitly");
  }
  table.name = std::string(metric_name);
  table.polarity = *polarity;
  return table;
}

}  // namespace knnqe
