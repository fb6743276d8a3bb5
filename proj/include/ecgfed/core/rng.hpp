#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace ecgfed {

// splitmix64 finalizer; used to derive stream seeds from (master, tag, ids).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64_bytes(const void* data, size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic seed derivation. Stream identity is (master, tag, ids...);
// every independent consumer of randomness derives its own stream so the
// draw order of one consumer never perturbs another.
inline uint64_t derive_seed(uint64_t master, std::string_view tag,
                            std::initializer_list<uint64_t> ids = {}) {
  uint64_t h = mix64(master ^ fnv1a64(tag));
  for (uint64_t id : ids) h = mix64(h ^ id);
  return h;
}

// Self-contained random stream. std::mt19937_64 output is fully specified by
// the standard; the distributions below are hand-rolled (std::*_distribution
// is not bit-portable across standard libraries). Gaussians use Box-Muller
// with the second sample cached. Draw order is part of on-disk determinism:
// never reorder calls in code that feeds persisted artifacts.
class RandStream {
 public:
  explicit RandStream(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // Uniform in [0,1), 53-bit resolution.
  double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * u01(); }

  // Uniform integer in [0, n). Modulo bias < 2^-50 for the n used here;
  // accepted for the sake of a fixed, portable draw count.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  // Inclusive integer range [lo, hi].
  int64_t uniform_int_range(int64_t lo, int64_t hi) {
    return lo + uniform_int(hi - lo + 1);
  }

  bool bernoulli(double p) { return u01() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = u01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 6.283185307179586476925286766559 * u01();
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ecgfed
