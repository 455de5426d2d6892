#pragma once

// Deliberately naive reference implementations. They share no code with the
// library beyond plain data types.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "knnqe/datastore.hpp"

namespace knnqe::oracle {

struct ScanHit {
  std::uint64_t entry;
  double distance;
};

// Full scan with double-precision L2; ties by entry index.
std::vector<ScanHit> knn_scan(const Datastore& store, std::span<const float> query, std::size_t k);

// Textbook formulas: sums of products, no centring.
double pearson(std::span<const double> x, std::span<const double> y);
// 1 - 6 sum d^2 / (n (n^2 - 1)); valid only without ties.
double spearman_no_ties(std::span<const double> x, std::span<const double> y);
// rank_i = 1 + #{x_j < x_i} + (#{x_j == x_i} - 1) / 2, by double loop.
std::vector<double> quadratic_ranks(std::span<const double> x);
double spearman_ties(std::span<const double> x, std::span<const double> y);

// ASCII-only tokeniser: lowercase, punctuation split off, whitespace split.
std::vector<std::string> ascii_tokens(const std::string& text);

struct BleuCounts {
  std::array<std::uint64_t, 4> matches{};
  std::array<std::uint64_t, 4> totals{};
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;
};

BleuCounts bleu_counts(const std::string& hyp, const std::vector<std::string>& refs);
double bleu(const std::string& hyp, const std::vector<std::string>& refs);

struct ChrfCounts {
  std::array<std::uint64_t, 6> matches{};
  std::array<std::uint64_t, 6> hyp{};
  std::array<std::uint64_t, 6> ref{};
};

ChrfCounts chrf_counts(const std::string& hyp, const std::string& ref);
double chrf(const std::string& hyp, const std::vector<std::string>& refs);

struct F1Best {
  double threshold;
  double f1;
};

// Tries every candidate threshold and classifies with plain comparisons.
F1Best f1_sweep(std::span<const double> scores, std::span<const int> labels, bool ok_class = false);

}  // namespace knnqe::oracle
