#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "avqf/error.hpp"

namespace avqf {

// Deterministic pseudo-random stream based on splitmix64. The draw sequence
// is a pure function of the 64-bit seed: only integer arithmetic and exact
// power-of-two scaling are involved, so identical seeds reproduce identical
// sequences across runs, compilers and platforms.
class RngState {
 public:
  static constexpr std::string_view kAlgorithm = "splitmix64";

  explicit RngState(uint64_t seed) : state_(seed) {}

  uint64_t seed() const { return state_; }

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53 bits of randomness.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Unbiased integer in [0, n), rejection sampled.
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw ValueError("RngState::next_below: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Independent child stream for a named consumer. Keeps initialization
  // deterministic even if call sites are added or reordered elsewhere.
  RngState fork(std::string_view label) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    RngState child(state_ ^ h);
    child.next_u64();
    return child;
  }

  // Fisher-Yates with our own draws; std::shuffle is not portable.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// FNV-1a over a byte string; used for config hashing and stream derivation.
inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace avqf
