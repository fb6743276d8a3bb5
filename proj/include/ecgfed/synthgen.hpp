#pragma once

// Page synthesis: calibrated 3x4-layout rendering of 12-lead signals, the
// per-client perturbation profiles, and the paired page/mask/signal dataset
// builder with manifest.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/image.hpp"
#include "core/io.hpp"
#include "core/rng.hpp"
#include "raster.hpp"
#include "signal.hpp"

namespace ecgfed::synthgen {

using nlohmann::json;

struct PanelBox {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  double t0 = 0.0, t1 = 0.0;  // rendered time window, seconds
  int lead = -1;
};

struct CalibrationMeta {
  double mm_per_px_x = 0.25, mm_per_px_y = 0.25;
  double paper_speed = 25.0;  // mm/s
  double gain = 10.0;         // mm/mV
  int page_w = 0, page_h = 0;
  std::array<PanelBox, kNumLeads> panels{};
  std::array<int, kNumLeads> baseline_rows{};
  double grid_contrast = 0.7;
  std::string record_id;

  double px_per_sec() const { return paper_speed / mm_per_px_x; }
  double px_per_mv() const { return gain / mm_per_px_y; }
};

struct RenderGeometry {
  double mm_per_px = 0.25;  // square pixels at desk scale (4 px/mm)
  int margin_px = 40;
  double paper_speed = 25.0;
  double gain = 10.0;
  double panel_sec = 2.5;
  double row_mm = 30.0;
  double pulse_mm = 10.0;  // lead-in region width holding the 1 mV pulse
  double trace_ink = 0.08;

  int panel_w_px() const {
    return static_cast<int>(std::lround(panel_sec * paper_speed / mm_per_px));
  }
  int row_h_px() const { return static_cast<int>(std::lround(row_mm / mm_per_px)); }
  int pulse_w_px() const { return static_cast<int>(std::lround(pulse_mm / mm_per_px)); }
  int plot_w_px() const { return pulse_w_px() + 4 * panel_w_px(); }
  int plot_h_px() const { return 3 * row_h_px(); }
  int page_w_px() const { return plot_w_px() + 2 * margin_px; }
  int page_h_px() const { return plot_h_px() + 2 * margin_px; }
  int grid_minor_px() const { return static_cast<int>(std::lround(1.0 / mm_per_px)); }
};

// Column-major clinical layout: column c hosts leads 3c..3c+2 top to bottom
// (I,II,III | aVR,aVL,aVF | V1..V3 | V4..V6), column c shows [2.5c, 2.5(c+1)) s.
inline CalibrationMeta make_calib(const RenderGeometry& g, const std::string& record_id,
                                  double grid_contrast) {
  CalibrationMeta c;
  c.mm_per_px_x = c.mm_per_px_y = g.mm_per_px;
  c.paper_speed = g.paper_speed;
  c.gain = g.gain;
  c.page_w = g.page_w_px();
  c.page_h = g.page_h_px();
  c.grid_contrast = grid_contrast;
  c.record_id = record_id;
  int pw = g.panel_w_px(), rh = g.row_h_px();
  for (int col = 0; col < 4; ++col)
    for (int row = 0; row < 3; ++row) {
      int lead = col * 3 + row;
      PanelBox& b = c.panels[lead];
      b.x0 = g.margin_px + g.pulse_w_px() + col * pw;
      b.y0 = g.margin_px + row * rh;
      b.w = pw;
      b.h = rh;
      b.t0 = col * g.panel_sec;
      b.t1 = (col + 1) * g.panel_sec;
      b.lead = lead;
      c.baseline_rows[lead] = b.y0 + rh / 2;
    }
  return c;
}

struct ProfileDraws {
  double hr = 0.0;
  double grid_contrast = 0.0;
  double stroke_halfwidth = 0.0;
  double skew_deg = 0.0;
  int quality = 100;
  double snr_db = 0.0;
  double blur_sigma = 0.0;
  int dx = 0, dy = 0;
  bool overlay = false;
  int overlay_type = -1;  // 0 shadow, 1 wrinkle, 2 handwriting
};

struct PageSample {
  GrayImage image;
  BinMask mask;
  CalibrationMeta calib;
  LeadSignalSet signal;
  std::string client;
  ProfileDraws draws;
};

struct ClientProfile {
  std::string name;
  double skew_range = 0.5;        // degrees, symmetric
  int quality_lo = 90, quality_hi = 95;
  double contrast_lo = 0.65, contrast_hi = 0.75;
  double snr_lo = 35.0, snr_hi = 40.0;
  double blur_lo = 0.0, blur_hi = 0.2;
  int offset_px = 2;              // symmetric integer layout offset
  double overlay_prob = 0.15;
  int n_pages = 0;
};

// The five built-in site profiles; counts follow the desk-scale default
// (200,160,140,120,100) unless overridden.
inline std::vector<ClientProfile> builtin_profiles(std::vector<int> counts = {}) {
  if (counts.empty()) counts = {200, 160, 140, 120, 100};
  if (counts.size() != 5) throw std::invalid_argument("need 5 client counts");
  std::vector<ClientProfile> p(5);
  p[0] = {"C1", 0.5, 90, 95, 0.65, 0.75, 35, 40, 0.0, 0.2, 2, 0.15, counts[0]};
  p[1] = {"C2", 1.0, 80, 90, 0.55, 0.70, 30, 35, 0.2, 0.4, 4, 0.15, counts[1]};
  p[2] = {"C3", 2.0, 75, 85, 0.45, 0.65, 27, 32, 0.3, 0.6, 6, 0.15, counts[2]};
  p[3] = {"C4", 3.0, 65, 80, 0.35, 0.55, 24, 30, 0.5, 0.8, 8, 0.15, counts[3]};
  p[4] = {"C5", 3.5, 60, 75, 0.30, 0.50, 20, 26, 0.7, 1.0, 10, 0.15, counts[4]};
  return p;
}

namespace detail {

// Max-blend capsule coverage for one segment into the buffer: linear ramp
// approximating pixel coverage of a stroke of the given half-width.
inline void stamp_segment(GrayImage& cov, double x0, double y0, double x1, double y1,
                          double halfwidth) {
  int xa = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - halfwidth - 1)));
  int xb = std::min(cov.w - 1, static_cast<int>(std::ceil(std::max(x0, x1) + halfwidth + 1)));
  int ya = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - halfwidth - 1)));
  int yb = std::min(cov.h - 1, static_cast<int>(std::ceil(std::max(y0, y1) + halfwidth + 1)));
  double vx = x1 - x0, vy = y1 - y0;
  double len2 = vx * vx + vy * vy;
  for (int y = ya; y <= yb; ++y)
    for (int x = xa; x <= xb; ++x) {
      double px = x - x0, py = y - y0;
      double t = len2 > 0 ? std::clamp((px * vx + py * vy) / len2, 0.0, 1.0) : 0.0;
      double dx = px - t * vx, dy = py - t * vy;
      double dist = std::sqrt(dx * dx + dy * dy);
      double c = std::clamp(halfwidth + 0.5 - dist, 0.0, 1.0);
      double& cell = cov.at(x, y);
      if (c > cell) cell = c;
    }
}

inline void stamp_polyline(GrayImage& cov, const std::vector<std::pair<double, double>>& pts,
                           double halfwidth) {
  for (size_t i = 0; i + 1 < pts.size(); ++i)
    stamp_segment(cov, pts[i].first, pts[i].second, pts[i + 1].first, pts[i + 1].second,
                  halfwidth);
}

}  // namespace detail

// Renders signal -> page. Grid lines darken the plot area at the given
// contrast (stored as the major-line brightness relative to background;
// minor lines sit halfway to background). Traces and the per-row 1 mV/200 ms
// calibration pulses are anti-aliased polylines; the emitted mask is the
// coverage >= 0.5 trace set. The seed only jitters the stroke width inside
// the documented 1-2 px band.
inline PageSample render_page(const LeadSignalSet& signal, const RenderGeometry& g,
                              double grid_contrast, uint64_t seed,
                              const std::string& record_id = "") {
  if (!(grid_contrast > 0.0 && grid_contrast <= 1.0))
    throw std::invalid_argument("grid_contrast in (0,1]");
  CalibrationMeta calib = make_calib(g, record_id, grid_contrast);
  int W = calib.page_w, H = calib.page_h;

  GrayImage img(W, H, 1.0);
  // Grid over the plot area, inclusive of both boundary lines.
  double major_i = grid_contrast;
  double minor_i = 0.5 * (1.0 + grid_contrast);
  int minor = g.grid_minor_px();
  int px0 = g.margin_px, py0 = g.margin_px;
  int pw = g.plot_w_px(), ph = g.plot_h_px();
  for (int k = 0; k * minor <= pw; ++k) {
    double v = (k % 5 == 0) ? major_i : minor_i;
    int x = px0 + k * minor;
    for (int y = py0; y <= py0 + ph; ++y) img.at(x, y) = std::min(img.at(x, y), v);
  }
  for (int k = 0; k * minor <= ph; ++k) {
    double v = (k % 5 == 0) ? major_i : minor_i;
    int y = py0 + k * minor;
    for (int x = px0; x <= px0 + pw; ++x) img.at(x, y) = std::min(img.at(x, y), v);
  }

  RandStream rng(seed);
  double halfwidth = 0.5 * rng.uniform(1.4, 1.8);

  GrayImage cov(W, H, 0.0);
  double pps = calib.px_per_sec(), ppm = calib.px_per_mv();
  // Calibration pulses, one per row, in the lead-in region left of column 0.
  int pu = g.pulse_w_px();
  for (int row = 0; row < 3; ++row) {
    double b = g.margin_px + row * g.row_h_px() + g.row_h_px() / 2;
    double x0 = g.margin_px;
    double flat = pu * 0.25, top = pu * 0.5;
    std::vector<std::pair<double, double>> pts = {
        {x0, b},          {x0 + flat, b},          {x0 + flat, b - ppm},
        {x0 + flat + top, b - ppm}, {x0 + flat + top, b}, {x0 + pu, b}};
    detail::stamp_polyline(cov, pts, halfwidth);
  }
  // Lead traces, each within its own panel's time window.
  for (int lead = 0; lead < kNumLeads; ++lead) {
    const PanelBox& bx = calib.panels[lead];
    double base = calib.baseline_rows[lead];
    std::vector<std::pair<double, double>> pts;
    int n = signal.n_samples();
    for (int i = 0; i < n; ++i) {
      double t = i / signal.fs;
      if (t < bx.t0 - 1e-12 || t >= bx.t1 - 1e-12) continue;
      pts.emplace_back(bx.x0 + (t - bx.t0) * pps, base - signal.leads[lead][i] * ppm);
    }
    detail::stamp_polyline(cov, pts, halfwidth);
  }

  PageSample out;
  out.mask = BinMask(W, H);
  for (size_t i = 0; i < cov.size(); ++i) {
    img.px[i] = img.px[i] * (1.0 - cov.px[i]) + g.trace_ink * cov.px[i];
    out.mask.px[i] = cov.px[i] >= 0.5 ? 1 : 0;
  }
  out.image = std::move(img);
  out.calib = calib;
  out.signal = signal;
  out.draws.grid_contrast = grid_contrast;
  out.draws.stroke_halfwidth = halfwidth;
  return out;
}

namespace detail {

inline void overlay_shadow(GrayImage& img, RandStream& rng) {
  double cx = rng.uniform(0.0, img.w), cy = rng.uniform(0.0, img.h);
  double sigma = rng.uniform(80.0, 160.0);
  double a = rng.uniform(0.08, 0.18);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      img.at(x, y) *= 1.0 - a * std::exp(-0.5 * d2 / (sigma * sigma));
    }
}

inline void overlay_wrinkle(GrayImage& img, RandStream& rng) {
  double cx = rng.uniform(0.0, img.w), cy = rng.uniform(0.0, img.h);
  double th = rng.uniform(0.0, 3.14159265358979323846);
  double nx = -std::sin(th), ny = std::cos(th);  // crease normal
  double width = rng.uniform(1.5, 3.0);
  double a = rng.uniform(0.10, 0.20);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double d = (x - cx) * nx + (y - cy) * ny;
      img.at(x, y) *= 1.0 - a * std::exp(-0.5 * d * d / (width * width));
    }
}

inline void overlay_handwriting(GrayImage& img, RandStream& rng) {
  int strokes = 1 + static_cast<int>(rng.uniform_int(3));
  GrayImage cov(img.w, img.h, 0.0);
  for (int s = 0; s < strokes; ++s) {
    double x = rng.uniform(0.1 * img.w, 0.9 * img.w);
    double y = rng.uniform(0.1 * img.h, 0.9 * img.h);
    double dir = rng.uniform(0.0, 6.283185307179586);
    int steps = 30 + static_cast<int>(rng.uniform_int(51));
    std::vector<std::pair<double, double>> pts{{x, y}};
    for (int i = 0; i < steps; ++i) {
      dir += rng.uniform(-0.5, 0.5);
      x = std::clamp(x + 2.0 * std::cos(dir), 0.0, img.w - 1.0);
      y = std::clamp(y + 2.0 * std::sin(dir), 0.0, img.h - 1.0);
      pts.emplace_back(x, y);
    }
    stamp_polyline(cov, pts, 0.6);
  }
  for (size_t i = 0; i < img.size(); ++i)
    img.px[i] = img.px[i] * (1.0 - cov.px[i]) + 0.25 * cov.px[i];
}

}  // namespace detail

// Samples one value per perturbation (order below is frozen: it defines the
// stream layout), then applies geometry to image AND mask — layout offsets
// also move the calibration boxes/baselines, the rotation stays recorded in
// the draws for the pipeline's deskew — and photometry to the image only, in
// scanner order: on-paper overlays, optical blur, sensor noise, compression.
inline PageSample apply_profile(const PageSample& page, const ClientProfile& prof,
                                uint64_t seed) {
  RandStream rng(seed);
  PageSample out;
  out.signal = page.signal;
  out.client = prof.name;
  out.calib = page.calib;
  ProfileDraws d = page.draws;
  d.skew_deg = rng.uniform(-prof.skew_range, prof.skew_range);
  d.quality = static_cast<int>(rng.uniform_int_range(prof.quality_lo, prof.quality_hi));
  d.snr_db = rng.uniform(prof.snr_lo, prof.snr_hi);
  d.blur_sigma = rng.uniform(prof.blur_lo, prof.blur_hi);
  d.dx = static_cast<int>(rng.uniform_int_range(-prof.offset_px, prof.offset_px));
  d.dy = static_cast<int>(rng.uniform_int_range(-prof.offset_px, prof.offset_px));
  d.overlay = rng.bernoulli(prof.overlay_prob);
  d.overlay_type = d.overlay ? static_cast<int>(rng.uniform_int(3)) : -1;
  uint64_t noise_seed = rng.bits();
  uint64_t overlay_seed = rng.bits();

  GrayImage img = raster::shift(page.image, d.dx, d.dy, 1.0);
  BinMask mask = raster::shift(page.mask, d.dx, d.dy);
  for (auto& b : out.calib.panels) {
    b.x0 += d.dx;
    b.y0 += d.dy;
  }
  for (auto& r : out.calib.baseline_rows) r += d.dy;
  if (d.skew_deg != 0.0) {
    img = raster::rotate(img, d.skew_deg, 1.0);
    mask = raster::rotate(mask, d.skew_deg);
  }

  if (d.overlay) {
    RandStream org(overlay_seed);
    if (d.overlay_type == 0)
      detail::overlay_shadow(img, org);
    else if (d.overlay_type == 1)
      detail::overlay_wrinkle(img, org);
    else
      detail::overlay_handwriting(img, org);
  }
  if (d.blur_sigma > 0.0) img = raster::gaussian_blur(img, d.blur_sigma);
  img = raster::add_noise_snr(img, d.snr_db, noise_seed);
  img = raster::blockdct_artifacts(img, d.quality);

  out.image = std::move(img);
  out.mask = std::move(mask);
  out.draws = d;
  return out;
}

// ---- JSON (de)serialization for metadata ----

inline void to_json(json& j, const PanelBox& b) {
  j = json{{"x0", b.x0}, {"y0", b.y0}, {"w", b.w},       {"h", b.h},
           {"t0", b.t0}, {"t1", b.t1}, {"lead", b.lead}};
}
inline void from_json(const json& j, PanelBox& b) {
  j.at("x0").get_to(b.x0);
  j.at("y0").get_to(b.y0);
  j.at("w").get_to(b.w);
  j.at("h").get_to(b.h);
  j.at("t0").get_to(b.t0);
  j.at("t1").get_to(b.t1);
  j.at("lead").get_to(b.lead);
}
inline void to_json(json& j, const CalibrationMeta& c) {
  j = json{{"mm_per_px_x", c.mm_per_px_x},
           {"mm_per_px_y", c.mm_per_px_y},
           {"paper_speed", c.paper_speed},
           {"gain", c.gain},
           {"page_w", c.page_w},
           {"page_h", c.page_h},
           {"panels", c.panels},
           {"baseline_rows", c.baseline_rows},
           {"grid_contrast", c.grid_contrast},
           {"record_id", c.record_id}};
}
inline void from_json(const json& j, CalibrationMeta& c) {
  j.at("mm_per_px_x").get_to(c.mm_per_px_x);
  j.at("mm_per_px_y").get_to(c.mm_per_px_y);
  j.at("paper_speed").get_to(c.paper_speed);
  j.at("gain").get_to(c.gain);
  j.at("page_w").get_to(c.page_w);
  j.at("page_h").get_to(c.page_h);
  j.at("panels").get_to(c.panels);
  j.at("baseline_rows").get_to(c.baseline_rows);
  j.at("grid_contrast").get_to(c.grid_contrast);
  j.at("record_id").get_to(c.record_id);
}
inline void to_json(json& j, const ProfileDraws& d) {
  j = json{{"hr", d.hr},
           {"grid_contrast", d.grid_contrast},
           {"skew_deg", d.skew_deg},
           {"quality", d.quality},
           {"snr_db", d.snr_db},
           {"blur_sigma", d.blur_sigma},
           {"dx", d.dx},
           {"dy", d.dy},
           {"overlay", d.overlay},
           {"overlay_type", d.overlay_type}};
}
inline void from_json(const json& j, ProfileDraws& d) {
  j.at("hr").get_to(d.hr);
  j.at("grid_contrast").get_to(d.grid_contrast);
  j.at("skew_deg").get_to(d.skew_deg);
  j.at("quality").get_to(d.quality);
  j.at("snr_db").get_to(d.snr_db);
  j.at("blur_sigma").get_to(d.blur_sigma);
  j.at("dx").get_to(d.dx);
  j.at("dy").get_to(d.dy);
  j.at("overlay").get_to(d.overlay);
  j.at("overlay_type").get_to(d.overlay_type);
}
inline void to_json(json& j, const ClientProfile& p) {
  j = json{{"name", p.name},
           {"skew_range", p.skew_range},
           {"quality_lo", p.quality_lo},
           {"quality_hi", p.quality_hi},
           {"contrast_lo", p.contrast_lo},
           {"contrast_hi", p.contrast_hi},
           {"snr_lo", p.snr_lo},
           {"snr_hi", p.snr_hi},
           {"blur_lo", p.blur_lo},
           {"blur_hi", p.blur_hi},
           {"offset_px", p.offset_px},
           {"overlay_prob", p.overlay_prob},
           {"n_pages", p.n_pages}};
}
inline void from_json(const json& j, ClientProfile& p) {
  j.at("name").get_to(p.name);
  j.at("skew_range").get_to(p.skew_range);
  j.at("quality_lo").get_to(p.quality_lo);
  j.at("quality_hi").get_to(p.quality_hi);
  j.at("contrast_lo").get_to(p.contrast_lo);
  j.at("contrast_hi").get_to(p.contrast_hi);
  j.at("snr_lo").get_to(p.snr_lo);
  j.at("snr_hi").get_to(p.snr_hi);
  j.at("blur_lo").get_to(p.blur_lo);
  j.at("blur_hi").get_to(p.blur_hi);
  j.at("offset_px").get_to(p.offset_px);
  j.at("overlay_prob").get_to(p.overlay_prob);
  j.at("n_pages").get_to(p.n_pages);
}

// ---- dataset build ----

struct DatasetConfig {
  uint64_t seed = 1;
  double fs = 100.0;
  double hr_lo = 55.0, hr_hi = 95.0;
  RenderGeometry geometry;
  std::vector<ClientProfile> profiles = builtin_profiles();
  double train_fraction = 0.8;
};

// Generates one page end to end from its own derived stream; pure, so the
// build parallelizes (and re-runs) bit-identically.
inline PageSample make_page(const DatasetConfig& cfg, const ClientProfile& prof,
                            const std::string& record_id) {
  RandStream ps(derive_seed(cfg.seed, "page", {fnv1a64(record_id)}));
  double hr = ps.uniform(cfg.hr_lo, cfg.hr_hi);
  double contrast = ps.uniform(prof.contrast_lo, prof.contrast_hi);
  uint64_t wf_seed = ps.bits();
  uint64_t render_seed = ps.bits();
  uint64_t prof_seed = ps.bits();
  LeadSignalSet sig = synth_waveforms(wf_seed, cfg.fs, hr);
  PageSample page = render_page(sig, cfg.geometry, contrast, render_seed, record_id);
  page.draws.hr = hr;
  page.client = prof.name;
  PageSample out = apply_profile(page, prof, prof_seed);
  out.draws.hr = hr;
  return out;
}

inline std::string record_name(const std::string& client, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d", client.c_str(), index);
  return buf;
}

// Builds the full dataset on disk and returns the manifest. The manifest is
// written last (atomically): its presence marks a committed build. File
// paths inside it are relative to out_dir.
inline json build_dataset(const DatasetConfig& cfg, const fs::path& out_dir) {
  json manifest;
  manifest["schema"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["fs"] = cfg.fs;
  manifest["clients"] = json::array();

  for (size_t ci = 0; ci < cfg.profiles.size(); ++ci) {
    const ClientProfile& prof = cfg.profiles[ci];
    if (prof.n_pages <= 0) throw std::invalid_argument("profile n_pages must be > 0");
    // Seeded 80/20 split via Fisher-Yates on the page indices.
    std::vector<int> order(prof.n_pages);
    for (int i = 0; i < prof.n_pages; ++i) order[i] = i;
    RandStream split_rng(derive_seed(cfg.seed, "split", {static_cast<uint64_t>(ci)}));
    for (int i = prof.n_pages - 1; i >= 1; --i) {
      int j = static_cast<int>(split_rng.uniform_int(i + 1));
      std::swap(order[i], order[j]);
    }
    int n_train = static_cast<int>(std::floor(cfg.train_fraction * prof.n_pages));
    std::vector<uint8_t> is_train(prof.n_pages, 0);
    for (int i = 0; i < n_train; ++i) is_train[order[i]] = 1;

    json jc;
    jc["name"] = prof.name;
    jc["profile"] = prof;
    jc["n_pages"] = prof.n_pages;
    jc["n_train"] = n_train;
    jc["n_val"] = prof.n_pages - n_train;
    jc["pages"] = json::array();

    for (int i = 0; i < prof.n_pages; ++i) {
      std::string rid = record_name(prof.name, i);
      std::string split = is_train[i] ? "train" : "val";
      PageSample page = make_page(cfg, prof, rid);

      fs::path dir = out_dir / "data" / prof.name / split;
      fs::create_directories(dir);
      std::string img_rel = "data/" + prof.name + "/" + split + "/" + rid + ".pgm";
      std::string mask_rel = "data/" + prof.name + "/" + split + "/" + rid + ".mask.pgm";
      std::string sig_rel = "data/" + prof.name + "/" + split + "/" + rid + ".signal.csv";
      std::string meta_rel = "data/" + prof.name + "/" + split + "/" + rid + ".meta.json";
      std::string img_bytes = encode_pgm(page.image);
      atomic_write_file(out_dir / img_rel, img_bytes);
      write_pgm(out_dir / mask_rel, page.mask);
      export_csv_signal(out_dir / sig_rel, page.signal);
      json meta;
      meta["record_id"] = rid;
      meta["client"] = prof.name;
      meta["split"] = split;
      meta["calib"] = page.calib;
      meta["draws"] = page.draws;
      atomic_write_file(out_dir / meta_rel, meta.dump(2) + "\n");

      json jp;
      jp["record_id"] = rid;
      jp["split"] = split;
      jp["image"] = img_rel;
      jp["mask"] = mask_rel;
      jp["signal"] = sig_rel;
      jp["meta"] = meta_rel;
      jp["content_hash"] = fnv1a64_bytes(img_bytes.data(), img_bytes.size());
      jc["pages"].push_back(jp);
    }
    manifest["clients"].push_back(jc);
  }
  atomic_write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace ecgfed::synthgen
