#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace knnqe {

// Seeded generator whose draws are identical on every standard library:
// only raw mt19937_64 output is used, never the implementation-defined
// std::*_distribution classes.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, bound), unbiased by rejection. bound > 0.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Fisher-Yates permutation of [0, n).
  std::vector<std::uint64_t> permutation(std::uint64_t n) {
    std::vector<std::uint64_t> p(n);
    std::iota(p.begin(), p.end(), std::uint64_t{0});
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(p[i - 1], p[below(i)]);
    }
    return p;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace knnqe
