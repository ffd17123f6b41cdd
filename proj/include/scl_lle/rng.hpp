#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "scl_lle/common.hpp"

namespace scl_lle {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Counter-based generator: every draw is a pure function of
// (seed, stream label, counter), so resumed or reordered runs reproduce the
// exact same values. Streams are derived from string labels; fork() derives
// an independent substream.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream)
      : key_(detail::splitmix64(seed ^ detail::splitmix64(fnv1a64(stream)))) {}

  Rng fork(std::string_view substream) const {
    Rng r = *this;
    r.key_ = detail::splitmix64(key_ ^ detail::splitmix64(fnv1a64(substream)));
    r.counter_ = 0;
    r.have_spare_ = false;
    return r;
  }

  Rng fork(std::uint64_t index) const {
    Rng r = *this;
    r.key_ = detail::splitmix64(key_ ^ detail::splitmix64(index * 0xD1342543DE82EF95ULL + 1));
    r.counter_ = 0;
    r.have_spare_ = false;
    return r;
  }

  std::uint64_t next_u64() {
    return detail::splitmix64(key_ + (counter_++) * 0x9E3779B97F4A7C15ULL);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased enough for desk-scale pools via 128-bit scaling
  std::uint64_t index(std::uint64_t n) {
    return std::uint64_t((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    // Box-Muller; u1 shifted into (0,1] so log() stays finite
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace scl_lle
