#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "unvalley/common.hpp"

namespace unvalley {

// Deterministic RNG with an explicit state and portable output. The standard
// distributions are implementation-defined, so Gaussian draws go through our
// own Box-Muller; results are bit-stable across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed + 0x9e3779b97f4a7c15ull) {}

  // Independent substream for a named purpose (noise init, data order, ...).
  Rng stream(std::string_view tag) const {
    std::uint64_t h = fnv1a64(tag.data(), tag.size(), state_);
    return Rng(h ^ 0xd1b54a32d192ed03ull);
  }

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    UNVALLEY_CHECK(n > 0, Error, "Rng::below requires n > 0");
    return next_u64() % n;
  }

  // Standard normal via Box-Muller; caches the second draw.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename It>
  void fill_gaussian(It first, It last) {
    for (; first != last; ++first) *first = gaussian();
  }

  template <typename RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace unvalley
