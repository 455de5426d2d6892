#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace knnqe {

enum class Polarity { kHigherIsBetter, kLowerIsBetter };

inline std::string_view to_string(Polarity p) {
  return p == Polarity::kHigherIsBetter ? "higher_is_better" : "lower_is_better";
}

// Accepts "higher", "lower", "higher_is_better", "lower_is_better".
inline std::optional<Polarity> parse_polarity(std::string_view text) {
  if (text == "higher" || text == "higher_is_better") return Polarity::kHigherIsBetter;
  if (text == "lower" || text == "lower_is_better") return Polarity::kLowerIsBetter;
  return std::nullopt;
}

// Multiplier that maps a score onto the higher-is-better orientation.
inline double orientation_sign(Polarity p) { return p == Polarity::kLowerIsBetter ? -1.0 : 1.0; }

}  // namespace knnqe
