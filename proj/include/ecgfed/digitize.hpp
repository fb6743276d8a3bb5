#pragma once

// Page -> 12-lead signal pipeline: light preprocessing with calibration
// estimation, Gaussian-weighted tiled model inference, thresholding and mask
// cleanup, panel-wise centerline tracing with a running band, and calibrated
// vectorization onto a uniform temporal grid. Savitzky-Golay smoothing exists
// only for display copies, which are flagged so metric code refuses them.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecgfed/core/image.hpp"
#include "ecgfed/raster.hpp"
#include "ecgfed/segnet.hpp"
#include "ecgfed/signal.hpp"
#include "ecgfed/synthgen.hpp"

namespace ecgfed {

using synthgen::CalibrationMeta;
using synthgen::PanelBox;

struct VectorizeParams {
  double bin_threshold = 0.5;
  long min_component_area = 12;  // px, at the 4 px/mm rendering scale
  int open_radius = 1;
  int max_gap = 6;            // px, geodesic close along x
  int band_halfwidth = 12;    // px, centerline tracking band
  double resample_fs = 100.0; // Hz
  int savgol_window = 9, savgol_order = 3;

  void validate() const {
    if (!(bin_threshold > 0.0 && bin_threshold < 1.0))
      throw std::invalid_argument("bin_threshold must lie in (0,1)");
    if (savgol_window % 2 == 0 || savgol_window <= savgol_order)
      throw std::invalid_argument("savgol window must be odd and greater than the order");
    if (min_component_area < 0 || open_radius < 0 || max_gap < 0 || band_halfwidth < 1)
      throw std::invalid_argument("negative cleanup parameter");
    if (!(resample_fs > 0.0)) throw std::invalid_argument("resample_fs must be positive");
  }

  // Pixel-denominated parameters are quoted at 0.25 mm/px and scale linearly
  // with resolution.
  VectorizeParams scaled_for(double mm_per_px) const {
    if (!(mm_per_px > 0.0)) throw std::invalid_argument("mm_per_px must be positive");
    double f = 0.25 / mm_per_px;
    VectorizeParams p = *this;
    p.min_component_area = std::max<long>(1, std::lround(min_component_area * f));
    p.open_radius = std::max(0, static_cast<int>(std::lround(open_radius * f)));
    p.max_gap = std::max(0, static_cast<int>(std::lround(max_gap * f)));
    p.band_halfwidth = std::max(1, static_cast<int>(std::lround(band_halfwidth * f)));
    return p;
  }
};

struct PreprocessResult {
  GrayImage image;  // normalized, deskewed when warranted, padded
  int orig_w = 0, orig_h = 0;
  int pad_right = 0, pad_bottom = 0;
  double skew_est_deg = 0.0;
  bool rotated = false;
  std::optional<double> grid_period_x_px, grid_period_y_px;
  double mm_per_px_x = 0.0, mm_per_px_y = 0.0;  // from the grid, or the fallback
  bool fallback_x = false, fallback_y = false;
};

inline PreprocessResult preprocess(const GrayImage& page, double default_mm_per_px = 0.25) {
  if (page.w <= 0 || page.h <= 0) throw std::invalid_argument("preprocess: empty page");
  PreprocessResult r;
  r.orig_w = page.w;
  r.orig_h = page.h;
  GrayImage img = raster::robust_normalize(page);
  r.skew_est_deg = raster::estimate_skew(img, 3.0, 0.05);
  if (std::fabs(r.skew_est_deg) > 0.25) {
    img = raster::rotate(img, r.skew_est_deg, 1.0);
    r.rotated = true;
  }
  auto period = [&](raster::Axis ax) -> std::optional<double> {
    int extent = ax == raster::Axis::X ? img.w : img.h;
    int max_p = std::min(16, extent / 4 - 1);
    if (max_p <= 2) return std::nullopt;
    return raster::estimate_grid_period(img, ax, 2, max_p);
  };
  r.grid_period_x_px = period(raster::Axis::X);
  r.grid_period_y_px = period(raster::Axis::Y);
  if (r.grid_period_x_px)
    r.mm_per_px_x = 1.0 / *r.grid_period_x_px;  // minor grid spacing is 1 mm
  else {
    r.mm_per_px_x = default_mm_per_px;
    r.fallback_x = true;
  }
  if (r.grid_period_y_px)
    r.mm_per_px_y = 1.0 / *r.grid_period_y_px;
  else {
    r.mm_per_px_y = default_mm_per_px;
    r.fallback_y = true;
  }
  r.pad_right = (4 - img.w % 4) % 4;
  r.pad_bottom = (4 - img.h % 4) % 4;
  if (r.pad_right || r.pad_bottom) {
    GrayImage padded(img.w + r.pad_right, img.h + r.pad_bottom, 1.0);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) padded.at(x, y) = img.at(x, y);
    img = std::move(padded);
  }
  r.image = std::move(img);
  return r;
}

// Sliding-window inference with Gaussian importance weighting (sigma = tile/8
// centered on each tile); overlapping contributions average by weight. The
// output is cropped back to the page's own size.
inline GrayImage infer_tiled(const NetConfig& cfg, const ParamVec& params, const GrayImage& page,
                             int tile = 128, double overlap = 0.5) {
  if (!(overlap >= 0.0 && overlap <= 0.75)) throw std::invalid_argument("overlap in [0, 0.75]");
  if (tile % 4 != 0 || tile <= 0) throw std::invalid_argument("tile must be a positive multiple of 4");
  if (page.w % 4 != 0 || page.h % 4 != 0)
    throw std::invalid_argument("page sides must be multiples of 4 (preprocess pads)");
  tile = std::min({tile, page.w, page.h});
  const int stride = std::max(1, static_cast<int>(std::lround(tile * (1.0 - overlap))));
  auto starts = [&](int extent) {
    std::vector<int> v;
    for (int s = 0; s + tile < extent; s += stride) v.push_back(s);
    v.push_back(extent - tile);
    return v;
  };
  const std::vector<int> xs = starts(page.w), ys = starts(page.h);

  std::vector<double> win(static_cast<std::size_t>(tile) * tile);
  const double c = (tile - 1) / 2.0, sigma = tile / 8.0;
  for (int i = 0; i < tile; ++i)
    for (int j = 0; j < tile; ++j)
      win[static_cast<std::size_t>(i) * tile + j] =
          std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2.0 * sigma * sigma));

  GrayImage acc(page.w, page.h, 0.0), wsum(page.w, page.h, 0.0);
  GrayImage patch(tile, tile);
  for (int y0 : ys)
    for (int x0 : xs) {
      for (int i = 0; i < tile; ++i)
        for (int j = 0; j < tile; ++j) patch.at(j, i) = page.at(x0 + j, y0 + i);
      ForwardResult fr = forward_probs(cfg, params, patch);
      for (int i = 0; i < tile; ++i)
        for (int j = 0; j < tile; ++j) {
          double w = win[static_cast<std::size_t>(i) * tile + j];
          acc.at(x0 + j, y0 + i) += w * fr.prob.at(j, i);
          wsum.at(x0 + j, y0 + i) += w;
        }
    }
  for (std::size_t i = 0; i < acc.size(); ++i) acc.px[i] /= wsum.px[i];
  return acc;
}

namespace detail {

// Structuring element for the cleanup opening: the open disc {d : |d| < r},
// so radius 1 is the identity footprint. A closed disc of radius 1 would
// erase the 1-2 px trace strokes this stage must preserve; speck removal is
// already handled by the area filter that runs first.
inline std::vector<std::pair<int, int>> open_disc(int radius) {
  std::vector<std::pair<int, int>> off;
  for (int dy = -(radius - 1); dy <= radius - 1; ++dy)
    for (int dx = -(radius - 1); dx <= radius - 1; ++dx)
      if (dx * dx + dy * dy < radius * radius) off.emplace_back(dx, dy);
  return off;
}

inline BinMask erode_with(const BinMask& m, const std::vector<std::pair<int, int>>& off) {
  BinMask out(m.w, m.h);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      uint8_t keep = 1;
      for (auto [dx, dy] : off)
        if (!m.at_or(x + dx, y + dy, 0)) {
          keep = 0;
          break;
        }
      out.at(x, y) = keep;
    }
  return out;
}

inline BinMask dilate_with(const BinMask& m, const std::vector<std::pair<int, int>>& off) {
  BinMask out(m.w, m.h);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      uint8_t hit = 0;
      for (auto [dx, dy] : off)
        if (m.at_or(x + dx, y + dy, 0)) {
          hit = 1;
          break;
        }
      out.at(x, y) = hit;
    }
  return out;
}

}  // namespace detail

inline BinMask binarize_and_clean(const GrayImage& prob, const VectorizeParams& p) {
  p.validate();
  BinMask m(prob.w, prob.h);
  for (std::size_t i = 0; i < prob.size(); ++i) m.px[i] = prob.px[i] >= p.bin_threshold ? 1 : 0;
  m = raster::remove_small_components(m, p.min_component_area);
  if (p.open_radius > 1) {
    auto se = detail::open_disc(p.open_radius);
    m = detail::dilate_with(detail::erode_with(m, se), se);
  }
  if (p.max_gap > 0) m = raster::geodesic_close_x(m, p.max_gap);
  return m;
}

inline std::array<PanelBox, kNumLeads> parse_panels(const CalibrationMeta& calib) {
  for (int l = 0; l < kNumLeads; ++l)
    if (calib.panels[l].w <= 0 || calib.panels[l].h <= 0)
      throw std::invalid_argument("parse_panels: calibration lacks panel boxes");
  return calib.panels;
}

struct PanelTrace {
  int lead = -1;
  PanelBox box;
  int baseline_row = 0;
  std::vector<double> center;    // per column; valid where present
  std::vector<uint8_t> present;  // 1 when the column had foreground in band
  double coverage = 0.0;
  bool low_confidence = false;
};

// Per-column centerline: the band around the running center (seeded at the
// panel baseline) selects which foreground belongs to the trace; vertical
// runs touching the band are taken in full, so steep strokes keep their true
// center instead of being clipped to the band edge. The mean row of the
// selected pixels becomes the centerline and the next running center. A
// column with an empty band retries once with the band re-seeded at the
// baseline, so a tracker parked away from the trace by a missed column
// re-anchors instead of staying lost for the rest of the panel.
inline std::array<PanelTrace, kNumLeads> trace_centerlines(const BinMask& mask,
                                                           const CalibrationMeta& calib,
                                                           const VectorizeParams& p) {
  p.validate();
  std::array<PanelTrace, kNumLeads> out;
  for (int l = 0; l < kNumLeads; ++l) {
    const PanelBox& bx = calib.panels[l];
    PanelTrace& tr = out[l];
    tr.lead = l;
    tr.box = bx;
    tr.baseline_row = calib.baseline_rows[l];
    tr.center.assign(static_cast<std::size_t>(bx.w), 0.0);
    tr.present.assign(static_cast<std::size_t>(bx.w), 0);
    double running = tr.baseline_row;
    long covered = 0;
    struct ColRun {
      int lo, hi;
    };
    std::vector<ColRun> runs;
    auto column_runs = [&](int x) {
      runs.clear();
      int y0 = std::max(bx.y0, 0), y1 = std::min(bx.y0 + bx.h, mask.h);
      for (int y = y0; y < y1;) {
        if (!mask.at(x, y)) {
          ++y;
          continue;
        }
        int s = y;
        while (y < y1 && mask.at(x, y)) ++y;
        runs.push_back({s, y - 1});
      }
    };
    // Column centers come from the single ink run nearest the band center
    // rather than from everything the band touches: stray ink within band
    // reach (a neighbouring panel's trace bridged across the junction by the
    // row closing, an unrelated stroke) must not drag the average. Runs
    // separated by pin-hole gaps still belong to one stroke, so the chosen
    // run absorbs neighbours within a couple of pixels before averaging. The
    // band is seeded by linearly extrapolating the last two centers, so it
    // leads the trace through steep flanks instead of lagging one column
    // behind and drifting onto nearby stray ink.
    struct Seed {
      double at = 0.0, momentum = 0.0;
      bool warm = false;
    };
    auto trace_at = [&](int k, Seed& sd) {
      int x = bx.x0 + k;
      tr.center[static_cast<std::size_t>(k)] = 0.0;
      tr.present[static_cast<std::size_t>(k)] = 0;
      if (x < 0 || x >= mask.w) return;
      column_runs(x);
      if (runs.empty()) {
        sd.momentum = 0.0;
        return;
      }
      auto edge_dist = [](const ColRun& r, double c) {
        return c < r.lo ? r.lo - c : (c > r.hi ? c - r.hi : 0.0);
      };
      auto nearest = [&](double c) {
        int best = -1;
        double bestd = p.band_halfwidth + 1e-9;
        for (std::size_t i = 0; i < runs.size(); ++i) {
          double d = edge_dist(runs[i], c);
          if (d < bestd) {
            bestd = d;
            best = static_cast<int>(i);
          }
        }
        return best;
      };
      double lead = sd.at + std::clamp(sd.momentum, -(double)p.band_halfwidth,
                                       (double)p.band_halfwidth);
      int pick = nearest(lead);
      if (pick < 0 && std::lround(lead) != static_cast<long>(tr.baseline_row))
        pick = nearest(tr.baseline_row);
      if (pick < 0) {
        sd.momentum = 0.0;
        return;
      }
      constexpr int kHoleGap = 3;
      int a = pick, b = pick;
      while (a > 0 && runs[static_cast<std::size_t>(a)].lo -
                              runs[static_cast<std::size_t>(a - 1)].hi <= kHoleGap)
        --a;
      while (b + 1 < static_cast<int>(runs.size()) &&
             runs[static_cast<std::size_t>(b + 1)].lo -
                     runs[static_cast<std::size_t>(b)].hi <= kHoleGap)
        ++b;
      double sum = 0.0;
      long cnt = 0;
      for (int i = a; i <= b; ++i) {
        const ColRun& r = runs[static_cast<std::size_t>(i)];
        sum += 0.5 * (r.lo + r.hi) * (r.hi - r.lo + 1);
        cnt += r.hi - r.lo + 1;
      }
      double cen = sum / static_cast<double>(cnt);
      tr.center[static_cast<std::size_t>(k)] = cen;
      tr.present[static_cast<std::size_t>(k)] = 1;
      sd.momentum = sd.warm ? cen - sd.at : 0.0;
      sd.at = cen;
      sd.warm = true;
    };
    Seed fwd;
    fwd.at = tr.baseline_row;
    for (int k = 0; k < bx.w; ++k) trace_at(k, fwd);
    // The forward pass starts cold at column 0, which may sit mid-stroke when
    // a beat straddles the panel boundary; the baseline-seeded band can then
    // lock a wrong run (or a junction-bridged bar) for several columns before
    // jumping onto the real trace. If any jump shows up among the leading
    // columns, anchor just past the last one on a quiet locked stretch and
    // re-trace the prefix backward from there.
    constexpr int kQuietLen = 5;
    constexpr double kQuietStep = 3.0;
    constexpr int kJumpWindow = 40;
    int lastjump = -1, prev = -1;
    for (int k = 0; k < bx.w && k < kJumpWindow; ++k) {
      if (!tr.present[static_cast<std::size_t>(k)]) continue;
      if (prev >= 0 && std::fabs(tr.center[static_cast<std::size_t>(k)] -
                                 tr.center[static_cast<std::size_t>(prev)]) > kQuietStep)
        lastjump = k;
      prev = k;
    }
    if (lastjump > 0) {
      int anchor = -1;
      for (int k = lastjump; k + kQuietLen <= bx.w && anchor < 0; ++k) {
        bool ok = true;
        for (int i = k; i < k + kQuietLen && ok; ++i) ok = tr.present[static_cast<std::size_t>(i)];
        for (int i = k; ok && i + 1 < k + kQuietLen; ++i)
          ok = std::fabs(tr.center[static_cast<std::size_t>(i + 1)] -
                         tr.center[static_cast<std::size_t>(i)]) <= kQuietStep;
        if (ok) anchor = k;
      }
      if (anchor > 0) {
        Seed bwd;
        bwd.at = tr.center[static_cast<std::size_t>(anchor)];
        bwd.warm = true;
        for (int k = anchor - 1; k >= 0; --k) trace_at(k, bwd);
      }
    }
    for (int k = 0; k < bx.w; ++k) covered += tr.present[static_cast<std::size_t>(k)];
    tr.coverage = bx.w > 0 ? static_cast<double>(covered) / bx.w : 0.0;
    tr.low_confidence = tr.coverage < 0.10;
  }
  return out;
}

namespace detail {

// Natural cubic spline on strictly increasing knots; linear extrapolation
// beyond the ends using the boundary slopes.
struct CubicSpline {
  std::vector<double> x, y, m;  // m: second derivatives at the knots

  static CubicSpline fit(std::vector<double> xs, std::vector<double> ys) {
    const std::size_t n = xs.size();
    if (n != ys.size() || n == 0) throw std::invalid_argument("spline: bad inputs");
    for (std::size_t i = 1; i < n; ++i)
      if (!(xs[i] > xs[i - 1])) throw std::invalid_argument("spline: knots must increase");
    CubicSpline s;
    s.x = std::move(xs);
    s.y = std::move(ys);
    s.m.assign(n, 0.0);
    if (n < 3) return s;
    std::vector<double> a(n, 0.0), b(n, 0.0), cdiag(n, 0.0), d(n, 0.0);
    for (std::size_t i = 1; i + 1 < n; ++i) {
      double h0 = s.x[i] - s.x[i - 1], h1 = s.x[i + 1] - s.x[i];
      a[i] = h0;
      b[i] = 2.0 * (h0 + h1);
      cdiag[i] = h1;
      d[i] = 6.0 * ((s.y[i + 1] - s.y[i]) / h1 - (s.y[i] - s.y[i - 1]) / h0);
    }
    // Thomas solve over interior unknowns with natural ends m0 = m_{n-1} = 0.
    for (std::size_t i = 2; i + 1 < n; ++i) {
      double w = a[i] / b[i - 1];
      b[i] -= w * cdiag[i - 1];
      d[i] -= w * d[i - 1];
    }
    for (std::size_t i = n - 2; i >= 1; --i) {
      double upper = (i + 2 < n) ? cdiag[i] * s.m[i + 1] : 0.0;
      s.m[i] = (d[i] - upper) / b[i];
      if (i == 1) break;
    }
    return s;
  }

  double eval(double t) const {
    const std::size_t n = x.size();
    if (n == 1) return y[0];
    if (t <= x.front()) {
      double h = x[1] - x[0];
      double slope = (y[1] - y[0]) / h - h * (2.0 * m[0] + m[1]) / 6.0;
      return y[0] + slope * (t - x[0]);
    }
    if (t >= x.back()) {
      double h = x[n - 1] - x[n - 2];
      double slope = (y[n - 1] - y[n - 2]) / h + h * (2.0 * m[n - 1] + m[n - 2]) / 6.0;
      return y[n - 1] + slope * (t - x[n - 1]);
    }
    std::size_t lo = 0, hi = n - 1;
    while (hi - lo > 1) {
      std::size_t mid = (lo + hi) / 2;
      (x[mid] <= t ? lo : hi) = mid;
    }
    double h = x[hi] - x[lo], u = t - x[lo], v = x[hi] - t;
    return (m[lo] * v * v * v + m[hi] * u * u * u) / (6.0 * h) +
           (y[lo] / h - m[lo] * h / 6.0) * v + (y[hi] / h - m[hi] * h / 6.0) * u;
  }
};

}  // namespace detail

// Calibrated vectorization: t(x) = panel window offset + column / (px/s),
// v(row) = (baseline - row) / (px/mV); per-lead natural cubic spline onto the
// uniform resample grid, window times outside the panel left at zero.
inline LeadSignalSet vectorize(const std::array<PanelTrace, kNumLeads>& traces,
                               const CalibrationMeta& calib, const VectorizeParams& p) {
  p.validate();
  const double pps = calib.px_per_sec(), ppm = calib.px_per_mv();
  LeadSignalSet out(p.resample_fs);
  out.covered.fill(false);
  const int n = out.n_samples();
  for (int l = 0; l < kNumLeads; ++l) {
    const PanelTrace& tr = traces[l];
    std::vector<double> ts, vs;
    for (int k = 0; k < tr.box.w; ++k)
      if (tr.present[static_cast<std::size_t>(k)]) {
        ts.push_back(tr.box.t0 + k / pps);
        vs.push_back((tr.baseline_row - tr.center[static_cast<std::size_t>(k)]) / ppm);
      }
    if (ts.empty()) continue;  // fully absent: zeros, covered stays false
    detail::CubicSpline sp = detail::CubicSpline::fit(std::move(ts), std::move(vs));
    for (int i = 0; i < n; ++i) {
      double t = i / p.resample_fs;
      if (t < tr.box.t0 - 1e-9 || t >= tr.box.t1 - 1e-9) continue;
      out.leads[l][i] = sp.eval(t);
    }
    out.covered[l] = true;
  }
  return out;
}

// Least-squares polynomial smoothing weights for the window center; the
// general evaluation-offset form backs the one-sided edge windows.
namespace detail {
inline std::vector<double> savgol_weights(int n_left, int n_right, int order, int eval_at) {
  const int npts = n_left + n_right + 1, ncoef = order + 1;
  if (npts <= order) throw std::invalid_argument("savgol: window must exceed order");
  // Normal equations G c = r with G[p][q] = sum_i i^(p+q), r[p] = eval_at^p
  // gives the LS fit evaluated at eval_at as a linear functional of the data.
  std::vector<double> G(static_cast<std::size_t>(ncoef) * ncoef, 0.0), r(ncoef, 0.0);
  for (int p = 0; p < ncoef; ++p) {
    for (int q = 0; q < ncoef; ++q) {
      double s = 0.0;
      for (int i = -n_left; i <= n_right; ++i) s += std::pow(static_cast<double>(i), p + q);
      G[static_cast<std::size_t>(p) * ncoef + q] = s;
    }
    r[static_cast<std::size_t>(p)] = std::pow(static_cast<double>(eval_at), p);
  }
  // Solve G^T lambda = r (G symmetric) by Gaussian elimination with pivoting.
  std::vector<double> lam = r;
  for (int col = 0; col < ncoef; ++col) {
    int piv = col;
    for (int row = col + 1; row < ncoef; ++row)
      if (std::fabs(G[static_cast<std::size_t>(row) * ncoef + col]) >
          std::fabs(G[static_cast<std::size_t>(piv) * ncoef + col]))
        piv = row;
    for (int k = 0; k < ncoef; ++k)
      std::swap(G[static_cast<std::size_t>(col) * ncoef + k],
                G[static_cast<std::size_t>(piv) * ncoef + k]);
    std::swap(lam[static_cast<std::size_t>(col)], lam[static_cast<std::size_t>(piv)]);
    double diag = G[static_cast<std::size_t>(col) * ncoef + col];
    if (diag == 0.0) throw std::runtime_error("savgol: singular normal equations");
    for (int row = 0; row < ncoef; ++row) {
      if (row == col) continue;
      double f = G[static_cast<std::size_t>(row) * ncoef + col] / diag;
      for (int k = 0; k < ncoef; ++k)
        G[static_cast<std::size_t>(row) * ncoef + k] -= f * G[static_cast<std::size_t>(col) * ncoef + k];
      lam[static_cast<std::size_t>(row)] -= f * lam[static_cast<std::size_t>(col)];
    }
    lam[static_cast<std::size_t>(col)] /= diag;
    for (int k = 0; k < ncoef; ++k)
      G[static_cast<std::size_t>(col) * ncoef + k] /= diag;
  }
  // weight_i = sum_p lambda_p * i^p
  std::vector<double> w(static_cast<std::size_t>(npts));
  for (int i = -n_left; i <= n_right; ++i) {
    double acc = 0.0;
    for (int p = 0; p < ncoef; ++p) acc += lam[static_cast<std::size_t>(p)] * std::pow(static_cast<double>(i), p);
    w[static_cast<std::size_t>(i + n_left)] = acc;
  }
  return w;
}
}  // namespace detail

// Center-point weights (same contract as savgol_weights; the general helper
// above also serves the one-sided edge windows of smooth_for_viz).
inline std::vector<double> savgol_coeffs(int window, int order) {
  return savgol_weights(window, order);
}

// Smoothed display copy. Edge samples use one-sided least-squares windows so
// polynomials up to the order pass through exactly everywhere. The result is
// flagged visualization-only and refused by all metric entry points.
inline LeadSignalSet smooth_for_viz(const LeadSignalSet& sig, int window = 9, int order = 3) {
  if (window % 2 == 0 || window <= order) throw std::invalid_argument("bad savgol window/order");
  LeadSignalSet out = sig;
  out.visualization_only = true;
  const int half = window / 2, n = sig.n_samples();
  std::vector<double> center = savgol_coeffs(window, order);
  for (int l = 0; l < kNumLeads; ++l) {
    const std::vector<double>& src = sig.leads[l];
    std::vector<double>& dst = out.leads[l];
    for (int i = 0; i < n; ++i) {
      int nl = std::min(half, i), nr = std::min(half, n - 1 - i);
      double acc = 0.0;
      if (nl == half && nr == half) {
        for (int k = -half; k <= half; ++k) acc += center[static_cast<std::size_t>(k + half)] * src[static_cast<std::size_t>(i + k)];
      } else {
        std::vector<double> w = detail::savgol_weights(nl, nr, order, 0);
        for (int k = -nl; k <= nr; ++k) acc += w[static_cast<std::size_t>(k + nl)] * src[static_cast<std::size_t>(i + k)];
      }
      dst[static_cast<std::size_t>(i)] = acc;
    }
  }
  return out;
}

struct DigitizeResult {
  PreprocessResult pre;
  GrayImage prob;
  BinMask mask;
  std::array<PanelTrace, kNumLeads> traces;
  LeadSignalSet signal;
};

inline DigitizeResult digitize_page(const NetConfig& cfg, const ParamVec& params,
                                    const GrayImage& page, const CalibrationMeta& calib,
                                    const VectorizeParams& vp, int tile = 128,
                                    double overlap = 0.5) {
  DigitizeResult r;
  r.pre = preprocess(page);
  r.prob = infer_tiled(cfg, params, r.pre.image, tile, overlap);
  // crop back to the original canvas
  if (r.pre.pad_right || r.pre.pad_bottom) {
    GrayImage crop(r.pre.orig_w, r.pre.orig_h);
    for (int y = 0; y < crop.h; ++y)
      for (int x = 0; x < crop.w; ++x) crop.at(x, y) = r.prob.at(x, y);
    r.prob = std::move(crop);
  }
  r.mask = binarize_and_clean(r.prob, vp);
  r.traces = trace_centerlines(r.mask, calib, vp);
  r.signal = vectorize(r.traces, calib, vp);
  return r;
}

}  // namespace ecgfed
