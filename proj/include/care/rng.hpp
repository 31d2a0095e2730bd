#pragma once

#include <cstddef>
#include <cstdint>

namespace care {

// SplitMix64. The stream depends only on the seed, so every platform produces
// the same sequence; floating-point draws are built from the integer bits.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Order-sensitive combination of two seeds into a well-mixed third.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace care
