#pragma once
// Secure aggregation substrate: l2 clipping, fixed-point ring encoding,
// pairwise one-time masks that cancel in the sum, and the threshold-gated
// masked summation. The aggregator never observes an individual update.
//
// Ring: 2^64 (native uint64 wraparound), scale 2^24 — headroom for up to 2^38
// weighted clipped contributions. Masks come from a counter-mode keyed 128-bit
// permutation (Speck128/128) keyed by the 128-bit pair seed, with the round
// index folded into the counter block; any cryptographic stream with this
// interface would do — masks only need to cancel within one run.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecgfed/core/rng.hpp"

namespace ecgfed {

// ---------------------------------------------------------------------------
// Speck128/128 block cipher (used as the mask PRG's keyed permutation)
// ---------------------------------------------------------------------------
namespace speck {

inline constexpr std::uint64_t ror64(std::uint64_t x, int r) {
  return (x >> r) | (x << (64 - r));
}
inline constexpr std::uint64_t rol64(std::uint64_t x, int r) {
  return (x << r) | (x >> (64 - r));
}

struct Key {
  std::array<std::uint64_t, 32> rk{};
  // key[0] is the low word (A), key[1] the high word (B) of the 128-bit key.
  explicit Key(const std::array<std::uint64_t, 2>& key) {
    std::uint64_t a = key[0], b = key[1];
    for (std::uint64_t i = 0; i < 32; ++i) {
      rk[i] = a;
      b = ror64(b, 8);
      b += a;
      b ^= i;
      a = rol64(a, 3);
      a ^= b;
    }
  }
};

// Encrypts the block (pt[0] = low word, pt[1] = high word) in place.
inline std::array<std::uint64_t, 2> encrypt(const Key& k,
                                            std::array<std::uint64_t, 2> pt) {
  std::uint64_t y = pt[0], x = pt[1];
  for (int i = 0; i < 32; ++i) {
    x = ror64(x, 8);
    x += y;
    x ^= k.rk[i];
    y = rol64(y, 3);
    y ^= x;
  }
  return {y, x};
}

}  // namespace speck

// Counter-mode stream of `n` ring words from a 128-bit seed and round index:
// block b encrypts (counter=b, round=r) and yields two output words.
inline std::vector<std::uint64_t> prg_stream(const std::array<std::uint64_t, 2>& seed,
                                             std::uint64_t round, std::size_t n) {
  std::vector<std::uint64_t> out(n);
  speck::Key key(seed);
  std::size_t b = 0;
  for (std::size_t i = 0; i < n; i += 2, ++b) {
    auto ct = speck::encrypt(key, {static_cast<std::uint64_t>(b), round});
    out[i] = ct[0];
    if (i + 1 < n) out[i + 1] = ct[1];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed-point ring vectors
// ---------------------------------------------------------------------------

struct FixedVec {
  static constexpr double kScale = 16777216.0;  // 2^24
  std::vector<std::uint64_t> values;
  std::size_t dim() const { return values.size(); }
};

// Nearest-integer quantization of w*v at scale 2^24, two's-complement embedded.
// Precondition: |w * value| < 2^15 per element (guaranteed post-clip).
inline FixedVec encode_fixed(const std::vector<double>& v, double w) {
  FixedVec out;
  out.values.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = w * v[i];
    if (!(std::fabs(x) < 32768.0))
      throw std::invalid_argument("encode_fixed: |w*value| >= 2^15 overflows the encoding");
    auto q = std::llround(x * FixedVec::kScale);
    out.values[i] = static_cast<std::uint64_t>(q);
  }
  return out;
}

inline std::vector<double> decode_fixed(const FixedVec& f) {
  std::vector<double> out(f.dim());
  for (std::size_t i = 0; i < f.dim(); ++i)
    out[i] = static_cast<double>(static_cast<std::int64_t>(f.values[i])) / FixedVec::kScale;
  return out;
}

// ---------------------------------------------------------------------------
// Clipping
// ---------------------------------------------------------------------------

struct ClipReport {
  int client = 0;
  double preclip_norm = 0;
  double scale = 1.0;  // min(1, C/norm)
};

inline std::pair<std::vector<double>, ClipReport> clip_update(
    const std::vector<double>& delta, double C = 1.0, int client = 0) {
  if (!(C > 0)) throw std::invalid_argument("clip_update: C must be > 0");
  double ss = 0;
  for (double x : delta) ss += x * x;
  double norm = std::sqrt(ss);
  ClipReport rep{client, norm, 1.0};
  std::vector<double> out = delta;
  if (norm > C) {
    rep.scale = C / norm;
    for (double& x : out) x *= rep.scale;
  }
  return {std::move(out), rep};
}

// ---------------------------------------------------------------------------
// Pairwise seeds and masks
// ---------------------------------------------------------------------------

// One 128-bit seed per unordered client pair; seed(i,j) == seed(j,i).
// The harness acts as the trusted setup and derives all pair seeds from the
// experiment master seed at start (key agreement is out of scope).
struct PairwiseSeeds {
  std::map<std::pair<int, int>, std::array<std::uint64_t, 2>> seeds;

  static PairwiseSeeds make(std::uint64_t master, const std::vector<int>& clients) {
    PairwiseSeeds ps;
    for (std::size_t a = 0; a < clients.size(); ++a)
      for (std::size_t b = a + 1; b < clients.size(); ++b) {
        int i = std::min(clients[a], clients[b]), j = std::max(clients[a], clients[b]);
        ps.seeds[{i, j}] = {
            derive_seed(master, "pairseed_lo", {static_cast<std::uint64_t>(i),
                                                static_cast<std::uint64_t>(j)}),
            derive_seed(master, "pairseed_hi", {static_cast<std::uint64_t>(i),
                                                static_cast<std::uint64_t>(j)})};
      }
    return ps;
  }

  const std::array<std::uint64_t, 2>& get(int i, int j) const {
    auto it = seeds.find({std::min(i, j), std::max(i, j)});
    if (it == seeds.end())
      throw std::invalid_argument("PairwiseSeeds: missing seed for pair (" +
                                  std::to_string(i) + "," + std::to_string(j) + ")");
    return it->second;
  }
};

// Sum over peers of signed per-pair PRG streams; sign(i,j) = +1 if i < j.
// Streams are one-time via the round index in the PRG counter block.
inline FixedVec mask_for(int client, std::uint64_t round, const std::vector<int>& peers,
                         const PairwiseSeeds& seeds, std::size_t dim) {
  bool member = false;
  for (int p : peers) member = member || (p == client);
  if (!member) throw std::invalid_argument("mask_for: client not in peer set");
  if (peers.size() < 2) throw std::invalid_argument("mask_for: need |S| >= 2");
  FixedVec m;
  m.values.assign(dim, 0);
  for (int j : peers) {
    if (j == client) continue;
    auto stream = prg_stream(seeds.get(client, j), round, dim);
    if (client < j)
      for (std::size_t d = 0; d < dim; ++d) m.values[d] += stream[d];
    else
      for (std::size_t d = 0; d < dim; ++d) m.values[d] -= stream[d];
  }
  return m;
}

inline FixedVec add_ring(const FixedVec& a, const FixedVec& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("add_ring: dim mismatch");
  FixedVec out = a;
  for (std::size_t i = 0; i < out.dim(); ++i) out.values[i] += b.values[i];
  return out;
}

// Threshold-gated decode: ring-sum of the masked submissions, then fixed-point
// decode. Refuses to decode anything below k_min submissions.
inline std::vector<double> masked_sum(const std::vector<FixedVec>& masked_updates,
                                      std::size_t k_min = 3) {
  if (masked_updates.size() < k_min)
    throw std::runtime_error("masked_sum: participation threshold violation (" +
                             std::to_string(masked_updates.size()) + " < k_min " +
                             std::to_string(k_min) + "), nothing decoded");
  FixedVec acc = masked_updates.front();
  for (std::size_t k = 1; k < masked_updates.size(); ++k)
    acc = add_ring(acc, masked_updates[k]);
  return decode_fixed(acc);
}

}  // namespace ecgfed
