#pragma once

// Deterministic raster ops for page synthesis and digitization preprocessing.
// Every function is pure: identical inputs (seeds included) give bit-identical
// outputs, which the dataset/run determinism guarantees build on.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "core/image.hpp"
#include "core/rng.hpp"

namespace ecgfed::raster {

enum class Axis { X, Y };

// Linear-interpolated percentile (the common "type 7" definition) of the
// pixel population. p in [0,1].
inline double percentile(const GrayImage& img, double p) {
  std::vector<double> v(img.px);
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  double idx = p * static_cast<double>(v.size() - 1);
  size_t lo = static_cast<size_t>(idx);
  size_t hi = std::min(lo + 1, v.size() - 1);
  double f = idx - static_cast<double>(lo);
  return v[lo] * (1.0 - f) + v[hi] * f;
}

// Maps [P(lo), P(hi)] linearly onto [0,1] with clamping; a flat image maps
// to constant 0.5.
inline GrayImage robust_normalize(const GrayImage& img, double lo = 0.01, double hi = 0.99) {
  double a = percentile(img, lo);
  double b = percentile(img, hi);
  GrayImage out(img.w, img.h);
  if (b - a < 1e-12) {
    std::fill(out.px.begin(), out.px.end(), 0.5);
    return out;
  }
  double inv = 1.0 / (b - a);
  for (size_t i = 0; i < img.size(); ++i)
    out.px[i] = std::clamp((img.px[i] - a) * inv, 0.0, 1.0);
  return out;
}

// Rotation about the image center, bilinear resampling, out-of-bounds reads
// take `fill`. Positive angles follow the (x right, y down) pixel frame; the
// only property other code relies on is that rotate(rotate(img, a), -a)
// approximately restores the input, and that estimate_skew below returns the
// angle that undoes a prior rotate.
inline GrayImage rotate(const GrayImage& img, double angle_deg, double fill) {
  GrayImage out(img.w, img.h);
  double th = angle_deg * 3.14159265358979323846 / 180.0;
  double c = std::cos(th), s = std::sin(th);
  double cx = (img.w - 1) * 0.5, cy = (img.h - 1) * 0.5;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double dx = x - cx, dy = y - cy;
      // inverse map: source = R(-angle) * dest
      double sx = cx + c * dx + s * dy;
      double sy = cy - s * dx + c * dy;
      int x0 = static_cast<int>(std::floor(sx));
      int y0 = static_cast<int>(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      auto sample = [&](int xi, int yi) -> double {
        if (xi < 0 || xi >= img.w || yi < 0 || yi >= img.h) return fill;
        return img.px[static_cast<size_t>(yi) * img.w + xi];
      };
      double v0 = sample(x0, y0) * (1 - fx) + sample(x0 + 1, y0) * fx;
      double v1 = sample(x0, y0 + 1) * (1 - fx) + sample(x0 + 1, y0 + 1) * fx;
      out.px[static_cast<size_t>(y) * img.w + x] = v0 * (1 - fy) + v1 * fy;
    }
  }
  return out;
}

// Integer translation; exposed for layout-offset perturbations so image and
// mask shift identically without resampling.
inline GrayImage shift(const GrayImage& img, int dx, int dy, double fill) {
  GrayImage out(img.w, img.h, fill);
  for (int y = 0; y < img.h; ++y) {
    int sy = y - dy;
    if (sy < 0 || sy >= img.h) continue;
    for (int x = 0; x < img.w; ++x) {
      int sx = x - dx;
      if (sx < 0 || sx >= img.w) continue;
      out.at(x, y) = img.at(sx, sy);
    }
  }
  return out;
}

inline BinMask shift(const BinMask& m, int dx, int dy) {
  BinMask out(m.w, m.h, 0);
  for (int y = 0; y < m.h; ++y) {
    int sy = y - dy;
    if (sy < 0 || sy >= m.h) continue;
    for (int x = 0; x < m.w; ++x) {
      int sx = x - dx;
      if (sx < 0 || sx >= m.w) continue;
      out.at(x, y) = m.at(sx, sy);
    }
  }
  return out;
}

// Binary-mask rotation: bilinear on the indicator, re-thresholded at 0.5.
inline BinMask rotate(const BinMask& m, double angle_deg) {
  GrayImage g(m.w, m.h);
  for (size_t i = 0; i < m.size(); ++i) g.px[i] = m.px[i];
  GrayImage r = rotate(g, angle_deg, 0.0);
  BinMask out(m.w, m.h);
  for (size_t i = 0; i < m.size(); ++i) out.px[i] = r.px[i] >= 0.5 ? 1 : 0;
  return out;
}

// Separable Gaussian blur, radius ceil(3*sigma), discrete sampled kernel
// normalized to 1, clamped (edge-replicating) borders. sigma <= 0 is identity.
inline GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  if (sigma <= 0.0) return img;
  int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(2 * r + 1);
  double sum = 0.0;
  for (int k = -r; k <= r; ++k) {
    w[k + r] = std::exp(-0.5 * k * k / (sigma * sigma));
    sum += w[k + r];
  }
  for (double& x : w) x /= sum;

  GrayImage tmp(img.w, img.h), out(img.w, img.h);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) acc += w[k + r] * img.at_clamped(x + k, y);
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) acc += w[k + r] * tmp.at_clamped(x, y + k);
      out.at(x, y) = acc;
    }
  return out;
}

// Additive Gaussian noise with variance set by the target SNR against the
// mean-removed image power; clamped to [0,1]. A zero-power image is a no-op.
inline GrayImage add_noise_snr(const GrayImage& img, double snr_db, uint64_t seed) {
  double mean = 0.0;
  for (double v : img.px) mean += v;
  mean /= img.size() ? static_cast<double>(img.size()) : 1.0;
  double power = 0.0;
  for (double v : img.px) power += (v - mean) * (v - mean);
  power /= img.size() ? static_cast<double>(img.size()) : 1.0;
  if (power <= 0.0) return img;
  double sd = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  RandStream rng(seed);
  GrayImage out(img.w, img.h);
  for (size_t i = 0; i < img.size(); ++i)
    out.px[i] = std::clamp(img.px[i] + sd * rng.normal(), 0.0, 1.0);
  return out;
}

namespace detail {

// Standard JPEG luminance quantization table (zigzag-free, row-major).
inline constexpr std::array<int, 64> kQLum = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

struct Dct8 {
  // Orthonormal DCT-II basis: C[u][x] = a(u) cos((2x+1)u*pi/16).
  double C[8][8];
  Dct8() {
    for (int u = 0; u < 8; ++u) {
      double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x)
        C[u][x] = a * std::cos((2 * x + 1) * u * 3.14159265358979323846 / 16.0);
    }
  }
};

inline const Dct8& dct8() {
  static const Dct8 d;
  return d;
}

}  // namespace detail

// Compression artifact simulation: per 8x8 block, orthonormal DCT-II of the
// level-shifted 8-bit-scale values, quantization by the luminance table with
// the usual quality scaling, inverse transform. Partial border blocks use
// edge replication. Not an entropy codec -- only the quantization artifact
// class matters here.
inline GrayImage blockdct_artifacts(const GrayImage& img, int quality) {
  if (quality < 1 || quality > 100) throw std::invalid_argument("quality in [1,100]");
  double s = quality < 50 ? 50.0 / quality : 2.0 - quality / 50.0;
  double q[64];
  for (int i = 0; i < 64; ++i)
    q[i] = std::max(1.0, std::round(detail::kQLum[i] * s));

  const auto& C = detail::dct8().C;
  GrayImage out(img.w, img.h);
  double v[8][8], t[8][8], S[8][8];
  for (int by = 0; by < img.h; by += 8) {
    for (int bx = 0; bx < img.w; bx += 8) {
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          v[i][j] = img.at_clamped(bx + j, by + i) * 255.0 - 128.0;
      // S = C v C^T
      for (int u = 0; u < 8; ++u)
        for (int j = 0; j < 8; ++j) {
          double acc = 0.0;
          for (int x = 0; x < 8; ++x) acc += C[u][x] * v[x][j];
          t[u][j] = acc;
        }
      for (int u = 0; u < 8; ++u)
        for (int w = 0; w < 8; ++w) {
          double acc = 0.0;
          for (int j = 0; j < 8; ++j) acc += t[u][j] * C[w][j];
          double qs = q[u * 8 + w];
          S[u][w] = std::round(acc / qs) * qs;
        }
      // v = C^T S C
      for (int x = 0; x < 8; ++x)
        for (int w = 0; w < 8; ++w) {
          double acc = 0.0;
          for (int u = 0; u < 8; ++u) acc += C[u][x] * S[u][w];
          t[x][w] = acc;
        }
      for (int x = 0; x < 8; ++x)
        for (int y2 = 0; y2 < 8; ++y2) {
          if (bx + y2 >= img.w || by + x >= img.h) continue;
          double acc = 0.0;
          for (int w = 0; w < 8; ++w) acc += t[x][w] * C[w][y2];
          out.at(bx + y2, by + x) = std::clamp((acc + 128.0) / 255.0, 0.0, 1.0);
        }
    }
  }
  return out;
}

namespace detail {
// Euclidean disc sampled at pixel centers with half-pixel inflation, so the
// radius-1 element is the full 3x3 neighborhood and the opening of a large
// solid rectangle is exactly the identity (no corner rounding).
inline std::vector<std::pair<int, int>> disc_offsets(int radius) {
  std::vector<std::pair<int, int>> off;
  double r2 = (radius + 0.5) * (radius + 0.5);
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= r2) off.emplace_back(dx, dy);
  return off;
}
}  // namespace detail

inline BinMask erode(const BinMask& m, int radius) {
  auto off = detail::disc_offsets(radius);
  BinMask out(m.w, m.h, 0);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      bool all = true;
      for (auto [dx, dy] : off)
        if (!m.at_or(x + dx, y + dy, 0)) {
          all = false;
          break;
        }
      out.at(x, y) = all ? 1 : 0;
    }
  return out;
}

inline BinMask dilate(const BinMask& m, int radius) {
  auto off = detail::disc_offsets(radius);
  BinMask out(m.w, m.h, 0);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(x, y)) continue;
      for (auto [dx, dy] : off) {
        int nx = x + dx, ny = y + dy;
        if (nx >= 0 && nx < m.w && ny >= 0 && ny < m.h) out.at(nx, ny) = 1;
      }
    }
  return out;
}

// Opening with a Euclidean-disc structuring element.
inline BinMask morph_open(const BinMask& m, int radius) {
  if (radius < 1) throw std::invalid_argument("radius >= 1");
  return dilate(erode(m, radius), radius);
}

// Bridges horizontal gaps of at most max_gap background pixels within each
// row, but only where the flanking runs belong to different 8-connected
// components — i.e. where the gap is a genuine break with no foreground path
// around it. Gaps between parts of one connected curve (the inside of a
// narrow spike, say) are left alone. Never acts across rows. Component
// labels are taken on the input, so every bridge between two fragments is
// filled regardless of fill order.
inline BinMask geodesic_close_x(const BinMask& m, int max_gap) {
  if (max_gap < 0) throw std::invalid_argument("max_gap >= 0");
  std::vector<int> label(m.size(), -1);
  int next = 0;
  std::vector<int> stack;
  for (int y0 = 0; y0 < m.h; ++y0)
    for (int x0 = 0; x0 < m.w; ++x0) {
      int i0 = y0 * m.w + x0;
      if (!m.px[i0] || label[i0] >= 0) continue;
      stack.assign(1, i0);
      label[i0] = next;
      while (!stack.empty()) {
        int i = stack.back();
        stack.pop_back();
        int x = i % m.w, y = i / m.w;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = x + dx, ny = y + dy;
            if (nx < 0 || nx >= m.w || ny < 0 || ny >= m.h) continue;
            int ni = ny * m.w + nx;
            if (m.px[ni] && label[ni] < 0) {
              label[ni] = next;
              stack.push_back(ni);
            }
          }
      }
      ++next;
    }
  BinMask out = m;
  for (int y = 0; y < m.h; ++y) {
    int prev_end = -1;  // x just past the previous run
    int x = 0;
    while (x < m.w) {
      if (!m.at(x, y)) {
        ++x;
        continue;
      }
      int start = x;
      while (x < m.w && m.at(x, y)) ++x;
      if (prev_end >= 1 && start - prev_end <= max_gap &&
          label[y * m.w + prev_end - 1] != label[y * m.w + start])
        for (int g = prev_end; g < start; ++g) out.at(g, y) = 1;
      prev_end = x;
    }
  }
  return out;
}

// Clears 8-connected components of area < min_area.
inline BinMask remove_small_components(const BinMask& m, long min_area) {
  if (min_area < 0) throw std::invalid_argument("min_area >= 0");
  BinMask out = m;
  std::vector<uint8_t> seen(m.size(), 0);
  std::vector<int> stack, comp;
  for (int y0 = 0; y0 < m.h; ++y0)
    for (int x0 = 0; x0 < m.w; ++x0) {
      int i0 = y0 * m.w + x0;
      if (!m.px[i0] || seen[i0]) continue;
      stack.assign(1, i0);
      comp.clear();
      seen[i0] = 1;
      while (!stack.empty()) {
        int i = stack.back();
        stack.pop_back();
        comp.push_back(i);
        int x = i % m.w, y = i / m.w;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = x + dx, ny = y + dy;
            if (nx < 0 || nx >= m.w || ny < 0 || ny >= m.h) continue;
            int ni = ny * m.w + nx;
            if (m.px[ni] && !seen[ni]) {
              seen[ni] = 1;
              stack.push_back(ni);
            }
          }
      }
      if (static_cast<long>(comp.size()) < min_area)
        for (int i : comp) out.px[i] = 0;
    }
  return out;
}

// Periodicity of the mean intensity profile along an axis, via unbiased
// autocorrelation of the mean-removed profile. Returns the best lag in
// [min_p, max_p] with sub-pixel parabolic refinement, or nullopt when the
// peak is below 0.2 of the lag-0 value (uncertain grid). Among peaks within
// 2% of the maximum the smallest lag wins, so the fundamental period beats
// its harmonics. Mean removal + ratio thresholding make the result invariant
// to affine intensity changes.
inline std::optional<double> estimate_grid_period(const GrayImage& img, Axis axis,
                                                  int min_p, int max_p) {
  int n = axis == Axis::X ? img.w : img.h;
  int m = axis == Axis::X ? img.h : img.w;
  if (!(2 <= min_p && min_p < max_p && max_p < n / 4))
    throw std::invalid_argument("need 2 <= min_p < max_p < extent/4");
  std::vector<double> p(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < m; ++j)
      acc += axis == Axis::X ? img.at(i, j) : img.at(j, i);
    p[i] = acc / m;
  }
  double mean = 0.0;
  for (double v : p) mean += v;
  mean /= n;
  for (double& v : p) v -= mean;

  auto R = [&](int lag) {
    double acc = 0.0;
    for (int i = 0; i + lag < n; ++i) acc += p[i] * p[i + lag];
    return acc / (n - lag);
  };
  double r0 = R(0);
  if (r0 <= 0.0) return std::nullopt;

  int lo = std::max(2, min_p - 1), hi = std::min(n - 2, max_p + 1);
  std::vector<double> r(hi - lo + 1);
  for (int L = lo; L <= hi; ++L) r[L - lo] = R(L);

  double best = -1e300;
  for (int L = min_p; L <= max_p; ++L) best = std::max(best, r[L - lo]);
  if (best < 0.2 * r0) return std::nullopt;
  int pick = -1;
  for (int L = min_p; L <= max_p; ++L)
    if (r[L - lo] >= 0.98 * best) {
      pick = L;
      break;
    }
  // Parabolic sub-pixel refinement when both neighbors are available.
  double refined = pick;
  if (pick - 1 >= lo && pick + 1 <= hi) {
    double ym = r[pick - 1 - lo], y0 = r[pick - lo], yp = r[pick + 1 - lo];
    double denom = ym - 2 * y0 + yp;
    if (std::abs(denom) > 1e-300) {
      double d = 0.5 * (ym - yp) / denom;
      refined += std::clamp(d, -0.5, 0.5);
    }
  }
  return std::clamp(refined, static_cast<double>(min_p), static_cast<double>(max_p));
}

// Grid-search deskew estimate: the candidate angle whose rotation maximizes
// the variance of the column-mean profile (vertical grid lines align with
// pixel columns at the correct correction). Candidates are visited in order
// of increasing |angle| with strictly-greater updates: ties break toward 0.
// The profile is taken over the central 80% window to suppress corner-fill
// bias. Returns the angle to *apply* to deskew the image.
inline double estimate_skew(const GrayImage& img, double range_deg, double step_deg) {
  if (!(range_deg <= 5.0) || !(step_deg > 0.0))
    throw std::invalid_argument("range <= 5 and step > 0");
  double mean = 0.0;
  for (double v : img.px) mean += v;
  mean /= img.size() ? static_cast<double>(img.size()) : 1.0;

  int x0 = img.w / 10, x1 = img.w - img.w / 10;
  int y0 = img.h / 10, y1 = img.h - img.h / 10;
  auto score = [&](const GrayImage& g) {
    int nc = x1 - x0;
    double sum = 0.0, sumsq = 0.0;
    for (int x = x0; x < x1; ++x) {
      double acc = 0.0;
      for (int y = y0; y < y1; ++y) acc += g.at(x, y);
      double cm = acc / (y1 - y0);
      sum += cm;
      sumsq += cm * cm;
    }
    double mu = sum / nc;
    return sumsq / nc - mu * mu;
  };

  int kmax = static_cast<int>(std::floor(range_deg / step_deg + 1e-9));
  double best_angle = 0.0, best_score = -1.0;
  for (int k = 0; k <= kmax; ++k) {
    for (int sign = 0; sign < (k == 0 ? 1 : 2); ++sign) {
      double a = (sign == 0 ? k : -k) * step_deg;
      double sc = score(k == 0 ? img : rotate(img, a, mean));
      if (sc > best_score) {
        best_score = sc;
        best_angle = a;
      }
    }
  }
  return best_angle;
}

// 2x box downsample (averages 2x2 blocks; odd trailing row/col dropped).
// Convenience for running the skew search at reduced cost.
inline GrayImage downsample2(const GrayImage& img) {
  GrayImage out(img.w / 2, img.h / 2);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.at(x, y) = 0.25 * (img.at(2 * x, 2 * y) + img.at(2 * x + 1, 2 * y) +
                             img.at(2 * x, 2 * y + 1) + img.at(2 * x + 1, 2 * y + 1));
  return out;
}

}  // namespace ecgfed::raster
