#include <gtest/gtest.h>

#include <cmath>

#include "knnqe/error.hpp"
#include "knnqe/random.hpp"
#include "knnqe/ref_metrics.hpp"
#include "oracles.hpp"

namespace knnqe {
namespace {

using Refs = std::vector<std::string>;

std::string random_text(SeededRng& rng, std::size_t min_words, std::size_t max_words) {
  static constexpr std::string_view kAlphabet = "aabbcde";
  static constexpr std::string_view kPunct = ".,!?";
  const std::size_t words = min_words + rng.below(max_words - min_words + 1);
  std::string out;
  for (std::size_t w = 0; w < words; ++w) {
    if (w) out += rng.below(6) == 0 ? "  " : " ";
    const std::size_t len = 1 + rng.below(4);
    for (std::size_t i = 0; i < len; ++i) out.push_back(kAlphabet[rng.below(kAlphabet.size())]);
    if (rng.below(5) == 0) out.push_back(kPunct[rng.below(kPunct.size())]);
  }
  return out;
}

TEST(Tokenizer, SplitsPunctuationAndLowercases) {
  const auto toks = bleu_tokenize("Hello, World!  It's  ok");
  std::vector<std::string> got;
  for (const auto& t : toks) got.push_back(encode_utf8(t));
  EXPECT_EQ(got, (std::vector<std::string>{"hello", ",", "world", "!", "it", "'", "s", "ok"}));
}

TEST(Tokenizer, UnicodeCaseAndSpaces) {
  const auto toks = bleu_tokenize("ÉCOLE Ωmega «Привет»");
  std::vector<std::string> got;
  for (const auto& t : toks) got.push_back(encode_utf8(t));
  EXPECT_EQ(got, (std::vector<std::string>{"école", "ωmega", "«", "привет", "»"}));
}

TEST(Utf8, MalformedBytesBecomeReplacement) {
  const auto cps = decode_utf8("a\xff" "b");
  ASSERT_EQ(cps.size(), 3u);
  EXPECT_EQ(cps[1], U'\uFFFD');
  EXPECT_EQ(encode_utf8(decode_utf8("naïve 日本")), "naïve 日本");
}

TEST(Bleu, IdentityIsOne) {
  EXPECT_EQ(sentence_bleu("the cat sat on the mat", Refs{"the cat sat on the mat"}), 1.0);
  EXPECT_EQ(sentence_bleu("a", Refs{"a"}), 1.0);
}

TEST(Bleu, BrevityExample) {
  EXPECT_NEAR(sentence_bleu("a b c d", Refs{"a b c d e"}), std::exp(-0.25), 1e-15);
}

TEST(Bleu, ZeroFourGramOverlapMatchesOracle) {
  const std::string hyp = "a b c d x";
  const Refs refs{"a b c y d"};
  const auto s = bleu_stats(hyp, refs);
  EXPECT_EQ(s.matches[3], 0u);
  EXPECT_EQ(sentence_bleu(hyp, refs), oracle::bleu(hyp, refs));
  EXPECT_GT(sentence_bleu(hyp, refs), 0.0);
}

TEST(Bleu, NoUnigramMatchIsZero) { EXPECT_EQ(sentence_bleu("x y", Refs{"a b"}), 0.0); }

TEST(Bleu, ClosestReferenceLengthShorterOnTie) {
  const auto s = bleu_stats("a b c d", Refs{"a b c d e f", "a b c", "a b c d e"});
  EXPECT_EQ(s.ref_length, 3u);
}

TEST(Bleu, ClipsByMaxOverReferences) {
  const auto s = bleu_stats("the the the", Refs{"the cat", "the the dog"});
  EXPECT_EQ(s.matches[0], 2u);
  EXPECT_EQ(s.totals[0], 3u);
}

TEST(Bleu, EmptyInputsRejected) {
  EXPECT_THROW(sentence_bleu("", Refs{"a"}), InvalidArgument);
  EXPECT_THROW(sentence_bleu("a", Refs{}), InvalidArgument);
  EXPECT_THROW(sentence_bleu("a", Refs{"   "}), InvalidArgument);
}

TEST(Bleu, MatchesOracleOnRandomPairs) {
  SeededRng rng(21);
  for (int i = 0; i < 200; ++i) {
    const std::string hyp = random_text(rng, 1, 12);
    Refs refs{random_text(rng, 1, 12)};
    if (i % 3 == 0) refs.push_back(random_text(rng, 1, 12));
    const auto s = bleu_stats(hyp, refs);
    const auto o = oracle::bleu_counts(hyp, refs);
    for (int n = 0; n < 4; ++n) {
      ASSERT_EQ(s.matches[n], o.matches[n]) << hyp << " | " << refs[0];
      ASSERT_EQ(s.totals[n], o.totals[n]);
    }
    ASSERT_EQ(s.hyp_length, o.hyp_len);
    ASSERT_EQ(s.ref_length, o.ref_len);
    ASSERT_EQ(sentence_bleu(hyp, refs), oracle::bleu(hyp, refs)) << hyp << " | " << refs[0];
  }
}

TEST(Chrf, IdentityIsOne) {
  EXPECT_EQ(sentence_chrf("abc", Refs{"abc"}), 1.0);
  EXPECT_EQ(sentence_chrf("a", Refs{"a"}), 1.0);
  EXPECT_EQ(sentence_chrf("a long sentence here", Refs{"a long sentence here"}), 1.0);
}

TEST(Chrf, ShortStringExample) {
  const auto s = chrf_stats("abc", "abd");
  EXPECT_EQ(s.matches[0], 2u);
  EXPECT_EQ(s.matches[1], 1u);
  EXPECT_EQ(s.matches[2], 0u);
  EXPECT_EQ(s.hyp_totals[3], 0u);
  EXPECT_EQ(sentence_chrf("abc", Refs{"abd"}), oracle::chrf("abc", {"abd"}));
  EXPECT_NEAR(sentence_chrf("abc", Refs{"abd"}), 7.0 / 18.0, 1e-15);
}

TEST(Chrf, OneSidedEmptyOrderScoresZero) {
  // Orders 3..6 exist only in the reference; they stay in the mean as 0.
  EXPECT_NEAR(sentence_chrf("ab", Refs{"abcdef"}), (5.0 * 1.0 / 3.0 / (4.0 + 1.0 / 3.0) + 5.0 * 1.0 / 5.0 / (4.0 + 1.0 / 5.0)) / 6.0,
              1e-15);
}

TEST(Chrf, MaxOverReferences) {
  EXPECT_EQ(sentence_chrf("the cat", Refs{"a dog", "the cat"}), 1.0);
  const double single = sentence_chrf("the cat", Refs{"the hat"});
  EXPECT_EQ(sentence_chrf("the cat", Refs{"the hat", "the hat"}), single);
}

TEST(Chrf, WhitespaceIgnored) { EXPECT_EQ(sentence_chrf("ab cd", Refs{"abcd"}), 1.0); }

TEST(Chrf, EmptyInputsRejected) {
  EXPECT_THROW(sentence_chrf("", Refs{"a"}), InvalidArgument);
  EXPECT_THROW(sentence_chrf("a", Refs{""}), InvalidArgument);
  EXPECT_THROW(sentence_chrf("a", Refs{}), InvalidArgument);
}

TEST(Chrf, MatchesOracleOnRandomPairs) {
  SeededRng rng(22);
  for (int i = 0; i < 200; ++i) {
    const std::string hyp = random_text(rng, 1, 8);
    const std::string ref = random_text(rng, 1, 8);
    const auto s = chrf_stats(hyp, ref);
    const auto o = oracle::chrf_counts(hyp, ref);
    for (int n = 0; n < 6; ++n) {
      ASSERT_EQ(s.matches[n], o.matches[n]) << hyp << " | " << ref;
      ASSERT_EQ(s.hyp_totals[n], o.hyp[n]);
      ASSERT_EQ(s.ref_totals[n], o.ref[n]);
    }
    ASSERT_EQ(sentence_chrf(hyp, Refs{ref}), oracle::chrf(hyp, {ref}));
  }
}

TEST(Chrf, AddingReferenceNeverLowersScore) {
  SeededRng rng(23);
  for (int i = 0; i < 100; ++i) {
    const std::string hyp = random_text(rng, 1, 8);
    const std::string a = random_text(rng, 1, 8);
    const std::string b = random_text(rng, 1, 8);
    EXPECT_GE(sentence_chrf(hyp, Refs{a, b}), sentence_chrf(hyp, Refs{a}));
  }
}

TEST(Metrics, PermutationInvariantAndBounded) {
  SeededRng rng(24);
  for (int i = 0; i < 50; ++i) {
    const std::string hyp = random_text(rng, 1, 10);
    Refs refs{random_text(rng, 1, 10), random_text(rng, 1, 10), random_text(rng, 1, 10)};
    Refs rev(refs.rbegin(), refs.rend());
    for (auto m : {LexicalMetric::kBleu, LexicalMetric::kChrf}) {
      const double v = reference_score(m, hyp, refs);
      EXPECT_EQ(v, reference_score(m, hyp, rev));
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(References, SubsetSelection) {
  const std::vector<Reference> refs{{"the cat sat", RefProvenance::kHuman},
                                    {"a dog ran", RefProvenance::kHuman},
                                    {"the cat sat down", RefProvenance::kSynthetic}};
  const std::vector<std::size_t> all{0, 1, 2};
  const Refs texts{"the cat sat", "a dog ran", "the cat sat down"};
  for (auto m : {LexicalMetric::kBleu, LexicalMetric::kChrf}) {
    EXPECT_EQ(best_reference_score(m, "the cat sat", refs, all), reference_score(m, "the cat sat", texts));
  }
  const std::vector<std::size_t> best{0};
  EXPECT_EQ(best_reference_score(LexicalMetric::kChrf, "the cat sat", refs, best),
            best_reference_score(LexicalMetric::kChrf, "the cat sat", refs, all));
  const std::vector<std::size_t> none;
  EXPECT_THROW(best_reference_score(LexicalMetric::kChrf, "x", refs, none), InvalidArgument);
  const std::vector<std::size_t> bad{3};
  EXPECT_THROW(best_reference_score(LexicalMetric::kChrf, "x", refs, bad), InvalidArgument);
}

TEST(References, AddValidates) {
  ReferenceSet set;
  const interchange::SegmentKey key{"A", "news", "1"};
  EXPECT_THROW(set.add(key, {}), InvalidArgument);
  EXPECT_THROW(set.add(key, {{"", RefProvenance::kHuman}}), InvalidArgument);
  set.add(key, {{"x", RefProvenance::kHuman}});
  EXPECT_EQ(set.refs.at(key).size(), 1u);
}

TEST(External, PolarityLookup) {
  EXPECT_EQ(known_polarity("TER"), Polarity::kLowerIsBetter);
  EXPECT_EQ(known_polarity("MetricX-23"), Polarity::kHigherIsBetter);
  EXPECT_EQ(known_polarity("COMET-22"), Polarity::kHigherIsBetter);
  EXPECT_EQ(known_polarity("knn_token_distance"), Polarity::kLowerIsBetter);
  EXPECT_FALSE(known_polarity("mystery"));
}

TEST(External, Ingest) {
  interchange::ScoreFragment f;
  f.name = "whatever";
  f.scores[{"A", "news", "1"}] = 0.3;
  EXPECT_EQ(ingest_external("TER", f).polarity, Polarity::kLowerIsBetter);
  EXPECT_EQ(ingest_external("TER", f).name, "TER");
  EXPECT_EQ(ingest_external("MetricX", f, Polarity::kHigherIsBetter).polarity, Polarity::kHigherIsBetter);
  EXPECT_EQ(ingest_external("TER", f, Polarity::kHigherIsBetter).polarity, Polarity::kHigherIsBetter);
  EXPECT_THROW(ingest_external("mystery", f), InvalidArgument);
  EXPECT_EQ(ingest_external("mystery", f, Polarity::kLowerIsBetter).polarity, Polarity::kLowerIsBetter);
}

TEST(External, LexicalNames) {
  EXPECT_EQ(parse_lexical_metric("bleu"), LexicalMetric::kBleu);
  EXPECT_EQ(parse_lexical_metric("chrf"), LexicalMetric::kChrf);
  EXPECT_FALSE(parse_lexical_metric("ter"));
  EXPECT_EQ(to_string(LexicalMetric::kChrf), "chrf");
}

}  // namespace
}  // namespace knnqe
