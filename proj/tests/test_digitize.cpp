#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <utility>
#include <vector>

#include "ecgfed/digitize.hpp"
#include "ecgfed/evalstats.hpp"

using namespace ecgfed;

namespace {

synthgen::PageSample clean_page(uint64_t seed, double contrast = 0.7) {
  LeadSignalSet sig = synth_waveforms(derive_seed(seed, "wf"), 100.0, 72.0);
  synthgen::RenderGeometry g;
  return synthgen::render_page(sig, g, contrast, derive_seed(seed, "rp"), "clean");
}

GrayImage mask_as_prob(const BinMask& m) {
  GrayImage g(m.w, m.h);
  for (std::size_t i = 0; i < m.size(); ++i) g.px[i] = m.px[i] ? 1.0 : 0.0;
  return g;
}

double dice_of(const BinMask& a, const BinMask& b) { return mask_metrics(a, b).dice; }

// Analytic centerline the tracer should recover at a column: the mean of the
// integer rows (inside the panel box) lying within the drawn stroke halfwidth
// of the lead's ideal polyline — i.e. the ink the renderer puts in that
// column, predicted from geometry instead of rasterized. NaN if no row is
// predicted covered.
double true_row(const synthgen::PageSample& page, int lead, int k) {
  const PanelBox& bx = page.calib.panels[lead];
  double pps = page.calib.px_per_sec(), ppm = page.calib.px_per_mv();
  double base = page.calib.baseline_rows[lead];
  double h = page.draws.stroke_halfwidth;
  double x = bx.x0 + k;
  std::vector<std::pair<double, double>> pts;
  int n = page.signal.n_samples();
  for (int i = 0; i < n; ++i) {
    double t = i / page.signal.fs;
    if (t < bx.t0 - 1e-12 || t >= bx.t1 - 1e-12) continue;
    pts.emplace_back(bx.x0 + (t - bx.t0) * pps, base - page.signal.leads[lead][i] * ppm);
  }
  double sum = 0.0;
  long cnt = 0;
  for (int y = bx.y0; y < bx.y0 + bx.h; ++y) {
    double best = 1e300;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      if (std::max(pts[i].first, pts[i + 1].first) < x - h - 1.0 ||
          std::min(pts[i].first, pts[i + 1].first) > x + h + 1.0)
        continue;
      double vx = pts[i + 1].first - pts[i].first, vy = pts[i + 1].second - pts[i].second;
      double px = x - pts[i].first, py = y - pts[i].second;
      double len2 = vx * vx + vy * vy;
      double t = len2 > 0 ? std::clamp((px * vx + py * vy) / len2, 0.0, 1.0) : 0.0;
      double dx = px - t * vx, dy = py - t * vy;
      best = std::min(best, dx * dx + dy * dy);
    }
    if (best <= h * h) {
      sum += y;
      ++cnt;
    }
  }
  return cnt > 0 ? sum / cnt : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TEST_CASE("preprocess on a clean render skips rotation and nails the grid") {
  synthgen::PageSample page = clean_page(21);
  PreprocessResult r = preprocess(page.image);
  CHECK_FALSE(r.rotated);
  CHECK(std::fabs(r.skew_est_deg) <= 0.25);
  REQUIRE(r.grid_period_x_px.has_value());
  REQUIRE(r.grid_period_y_px.has_value());
  CHECK(r.mm_per_px_x == Catch::Approx(0.25).epsilon(0.05));
  CHECK(r.mm_per_px_y == Catch::Approx(0.25).epsilon(0.05));
  CHECK_FALSE(r.fallback_x);
  CHECK(r.image.w % 4 == 0);
  CHECK(r.image.h % 4 == 0);
  CHECK(r.image.w - r.pad_right == page.image.w);
}

TEST_CASE("preprocess deskews a rotated page") {
  synthgen::PageSample page = clean_page(22);
  GrayImage tilted = raster::rotate(page.image, 2.0, 1.0);
  PreprocessResult r = preprocess(tilted);
  CHECK(r.rotated);
  CHECK(std::fabs(std::fabs(r.skew_est_deg) - 2.0) < 0.2);
  PreprocessResult residual = preprocess(r.image);
  CHECK(std::fabs(residual.skew_est_deg) <= 0.25);
}

TEST_CASE("preprocess falls back to the default scale on gridless input") {
  GrayImage flat(64, 48, 1.0);
  PreprocessResult r = preprocess(flat, 0.3);
  CHECK(r.fallback_x);
  CHECK(r.fallback_y);
  CHECK(r.mm_per_px_x == 0.3);
  CHECK(r.mm_per_px_y == 0.3);
  CHECK_THROWS_AS(preprocess(GrayImage()), std::invalid_argument);
}

TEST_CASE("tiled inference of a constant model is constant for any overlap") {
  NetConfig cfg;
  cfg.channels = {2, 3, 4};
  ParamVec zeros(make_layout(cfg).total, 0.0);
  RandStream rs(5);
  GrayImage page(96, 64);
  for (auto& p : page.px) p = rs.u01();
  for (double ov : {0.0, 0.5}) {
    GrayImage field = infer_tiled(cfg, zeros, page, 32, ov);
    REQUIRE(field.w == 96);
    REQUIRE(field.h == 64);
    for (double p : field.px) REQUIRE(p == Catch::Approx(0.5).margin(1e-12));
  }
}

TEST_CASE("zero overlap reproduces independent per-tile forwards") {
  NetConfig cfg;
  cfg.channels = {2, 3, 4};
  ParamVec theta = init_params(cfg, 9);
  RandStream rs(6);
  GrayImage page(64, 32);
  for (auto& p : page.px) p = rs.u01();
  GrayImage field = infer_tiled(cfg, theta, page, 32, 0.0);
  for (int ty = 0; ty < 1; ++ty)
    for (int tx = 0; tx < 2; ++tx) {
      GrayImage patch(32, 32);
      for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) patch.at(j, i) = page.at(tx * 32 + j, ty * 32 + i);
      ForwardResult fr = forward_probs(cfg, theta, patch);
      for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j)
          REQUIRE(field.at(tx * 32 + j, ty * 32 + i) ==
                  Catch::Approx(fr.prob.at(j, i)).margin(1e-12));
    }
}

TEST_CASE("overlap softens tile-seam discontinuities") {
  NetConfig cfg;
  cfg.channels = {2, 3, 4};
  ParamVec theta = init_params(cfg, 31);
  // A smooth low-frequency field: the underlying response is then locally
  // smooth and any sharp column-to-column jump is attributable to tiling.
  GrayImage crop(128, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 128; ++x)
      crop.at(x, y) =
          0.5 +
          0.25 * std::sin(2 * M_PI * x / 57.0 + 0.3) * std::cos(2 * M_PI * y / 41.0 + 1.1) +
          0.2 * std::sin(2 * M_PI * (x + y) / 73.0 + 2.0);
  GrayImage hard = infer_tiled(cfg, theta, crop, 32, 0.0);
  GrayImage soft = infer_tiled(cfg, theta, crop, 32, 0.5);
  auto seam_jump = [](const GrayImage& f) {
    double worst = 0.0;
    for (int x : {31, 63, 95})
      for (int y = 0; y < f.h; ++y)
        worst = std::max(worst, std::fabs(f.at(x + 1, y) - f.at(x, y)));
    return worst;
  };
  CHECK(seam_jump(soft) < seam_jump(hard));
}

TEST_CASE("binarize-and-clean basics") {
  VectorizeParams p;
  SECTION("all-zero field gives an empty mask") {
    GrayImage zeros(40, 30, 0.0);
    CHECK(binarize_and_clean(zeros, p).count() == 0);
  }
  SECTION("ground-truth probabilities survive the chain") {
    synthgen::PageSample page = clean_page(24);
    BinMask cleaned = binarize_and_clean(mask_as_prob(page.mask), p);
    CHECK(dice_of(cleaned, page.mask) > 0.995);
  }
  SECTION("salt noise is scrubbed") {
    synthgen::PageSample page = clean_page(25);
    GrayImage prob = mask_as_prob(page.mask);
    RandStream rs(77);
    long flips = std::lround(1e-3 * prob.size());
    for (long i = 0; i < flips; ++i) {
      int x = static_cast<int>(rs.uniform_int(prob.w));
      int y = static_cast<int>(rs.uniform_int(prob.h));
      prob.at(x, y) = 1.0;
    }
    BinMask cleaned = binarize_and_clean(prob, p);
    CHECK(dice_of(cleaned, page.mask) > 0.99);
  }
  SECTION("threshold is a half-open comparison") {
    GrayImage g(8, 8, 0.5);
    VectorizeParams q;
    q.min_component_area = 1;
    q.open_radius = 0;
    q.max_gap = 0;
    CHECK(binarize_and_clean(g, q).count() == 64);  // P >= tau
  }
  SECTION("invalid parameters throw") {
    VectorizeParams q;
    q.bin_threshold = 0.0;
    CHECK_THROWS_AS(binarize_and_clean(GrayImage(4, 4), q), std::invalid_argument);
    VectorizeParams r2;
    r2.savgol_window = 4;
    CHECK_THROWS_AS(binarize_and_clean(GrayImage(4, 4), r2), std::invalid_argument);
  }
}

TEST_CASE("panel parsing passes the calibration layout through") {
  synthgen::PageSample page = clean_page(26);
  auto boxes = parse_panels(page.calib);
  for (int l = 0; l < kNumLeads; ++l) {
    CHECK(boxes[l].x0 == page.calib.panels[l].x0);
    CHECK(boxes[l].w == page.calib.panels[l].w);
    CHECK(boxes[l].lead == l);
  }
  // column-major 3x4: lead II (index 1) sits in grid row 2, column 1
  synthgen::RenderGeometry g;
  CHECK(boxes[1].t0 == 0.0);
  CHECK(boxes[1].x0 == boxes[0].x0);
  CHECK(boxes[1].y0 == g.margin_px + g.row_h_px());
  // boxes tile the plot area without overlap
  long area = 0;
  for (const auto& b : boxes) area += static_cast<long>(b.w) * b.h;
  CHECK(area == 4L * boxes[0].w * 3 * boxes[0].h);
  for (int a = 0; a < kNumLeads; ++a)
    for (int b2 = a + 1; b2 < kNumLeads; ++b2) {
      const auto &A = boxes[a], &B = boxes[b2];
      bool overlap = A.x0 < B.x0 + B.w && B.x0 < A.x0 + A.w && A.y0 < B.y0 + B.h &&
                     B.y0 < A.y0 + A.h;
      CHECK_FALSE(overlap);
    }
  CHECK_THROWS_AS(parse_panels(CalibrationMeta{}), std::invalid_argument);
}

TEST_CASE("centerline tracing on synthetic bands") {
  synthgen::PageSample page = clean_page(27);
  const PanelBox& bx = page.calib.panels[0];
  int base = page.calib.baseline_rows[0];
  VectorizeParams p;

  SECTION("one-pixel horizontal line is traced exactly") {
    BinMask m(page.calib.page_w, page.calib.page_h);
    for (int k = 0; k < bx.w; ++k) m.at(bx.x0 + k, base + 3) = 1;
    auto traces = trace_centerlines(m, page.calib, p);
    for (int k = 0; k < bx.w; ++k) {
      REQUIRE(traces[0].present[k] == 1);
      REQUIRE(traces[0].center[k] == static_cast<double>(base + 3));
    }
    CHECK_FALSE(traces[0].low_confidence);
    CHECK(traces[0].coverage == 1.0);
  }
  SECTION("three-pixel-thick line centers on the middle row") {
    BinMask m(page.calib.page_w, page.calib.page_h);
    for (int k = 0; k < bx.w; ++k)
      for (int dy = -1; dy <= 1; ++dy) m.at(bx.x0 + k, base + dy) = 1;
    auto traces = trace_centerlines(m, page.calib, p);
    for (int k = 0; k < bx.w; ++k) REQUIRE(traces[0].center[k] == static_cast<double>(base));
  }
  SECTION("absent columns and the low-confidence flag") {
    BinMask m(page.calib.page_w, page.calib.page_h);
    for (int k = 0; k < bx.w / 20; ++k) m.at(bx.x0 + k, base) = 1;  // 5% coverage
    auto traces = trace_centerlines(m, page.calib, p);
    CHECK(traces[0].low_confidence);
    CHECK(traces[0].present[bx.w - 1] == 0);
    // untouched panels are fully absent but still returned
    CHECK(traces[5].coverage == 0.0);
    CHECK(traces[5].low_confidence);
  }
  SECTION("centerlines stay inside the panel box") {
    BinMask m(page.calib.page_w, page.calib.page_h, 1);  // everything foreground
    auto traces = trace_centerlines(m, page.calib, p);
    for (const auto& tr : traces)
      for (int k = 0; k < tr.box.w; ++k) {
        REQUIRE(tr.center[k] >= tr.box.y0);
        REQUIRE(tr.center[k] < tr.box.y0 + tr.box.h);
      }
  }
}

TEST_CASE("traced centerlines track the analytic polyline") {
  double worst_rmse = 0.0;
  for (uint64_t seed : {31u, 32u, 33u}) {
    synthgen::PageSample page = clean_page(seed);
    VectorizeParams p;
    auto traces = trace_centerlines(page.mask, page.calib, p);
    for (int l = 0; l < kNumLeads; ++l) {
      double acc = 0.0;
      long cnt = 0;
      for (int k = 0; k < traces[l].box.w; ++k) {
        if (!traces[l].present[k]) continue;
        double t = true_row(page, l, k);
        if (std::isnan(t)) continue;
        double d = traces[l].center[k] - t;
        acc += d * d;
        ++cnt;
      }
      REQUIRE(cnt > traces[l].box.w * 9 / 10);
      double rmse = std::sqrt(acc / cnt);
      INFO("seed " << seed << " lead " << l << " rmse " << rmse);
      REQUIRE(rmse < 0.7);
      worst_rmse = std::max(worst_rmse, rmse);
    }
  }
  std::printf("centerline vs analytic: worst per-lead rmse %.3f px\n", worst_rmse);
}

TEST_CASE("vectorization calibration examples") {
  synthgen::PageSample page = clean_page(41);
  const CalibrationMeta& calib = page.calib;
  VectorizeParams p;

  SECTION("ten millimetres above baseline reads one millivolt") {
    std::array<PanelTrace, kNumLeads> traces;
    for (int l = 0; l < kNumLeads; ++l) {
      traces[l].lead = l;
      traces[l].box = calib.panels[l];
      traces[l].baseline_row = calib.baseline_rows[l];
      traces[l].center.assign(traces[l].box.w, calib.baseline_rows[l] - 40.0);  // 10 mm up
      traces[l].present.assign(traces[l].box.w, 1);
      traces[l].coverage = 1.0;
    }
    LeadSignalSet sig = vectorize(traces, calib, p);
    for (int l = 0; l < kNumLeads; ++l) {
      REQUIRE(sig.covered[l]);
      const PanelBox& bx = calib.panels[l];
      for (int i = 0; i < sig.n_samples(); ++i) {
        double t = i / sig.fs;
        if (t < bx.t0 || t >= bx.t1 - 1e-9) continue;
        REQUIRE(sig.leads[l][i] == Catch::Approx(1.0).margin(1e-9));
      }
    }
  }
  SECTION("linear ramps pass through the spline exactly") {
    std::array<PanelTrace, kNumLeads> traces;
    for (int l = 0; l < kNumLeads; ++l) {
      traces[l].lead = l;
      traces[l].box = calib.panels[l];
      traces[l].baseline_row = calib.baseline_rows[l];
      traces[l].center.assign(traces[l].box.w, 0.0);
      traces[l].present.assign(traces[l].box.w, 1);
      for (int k = 0; k < traces[l].box.w; ++k)
        traces[l].center[k] = calib.baseline_rows[l] - 0.1 * k;
      traces[l].coverage = 1.0;
    }
    LeadSignalSet sig = vectorize(traces, calib, p);
    const PanelBox& bx = calib.panels[3];
    double pps = calib.px_per_sec(), ppm = calib.px_per_mv();
    for (int i = 0; i < sig.n_samples(); ++i) {
      double t = i / sig.fs;
      if (t < bx.t0 || t >= bx.t1 - 1e-9) continue;
      double k = (t - bx.t0) * pps;
      REQUIRE(sig.leads[3][i] == Catch::Approx(0.1 * k / ppm).margin(1e-9));
    }
  }
  SECTION("a fully absent lead is zero and uncovered") {
    std::array<PanelTrace, kNumLeads> traces;
    for (int l = 0; l < kNumLeads; ++l) {
      traces[l].lead = l;
      traces[l].box = calib.panels[l];
      traces[l].baseline_row = calib.baseline_rows[l];
      traces[l].center.assign(traces[l].box.w, 0.0);
      traces[l].present.assign(traces[l].box.w, l == 7 ? 0 : 1);
      if (l != 7)
        for (int k = 0; k < traces[l].box.w; ++k)
          traces[l].center[k] = calib.baseline_rows[l] - 4.0;
    }
    LeadSignalSet sig = vectorize(traces, calib, p);
    CHECK_FALSE(sig.covered[7]);
    for (double v : sig.leads[7]) CHECK(v == 0.0);
    CHECK(sig.covered[6]);
  }
  SECTION("voltage scales linearly with the vertical calibration") {
    std::array<PanelTrace, kNumLeads> traces;
    for (int l = 0; l < kNumLeads; ++l) {
      traces[l].lead = l;
      traces[l].box = calib.panels[l];
      traces[l].baseline_row = calib.baseline_rows[l];
      traces[l].center.assign(traces[l].box.w, calib.baseline_rows[l] - 20.0);
      traces[l].present.assign(traces[l].box.w, 1);
    }
    CalibrationMeta doubled = calib;
    doubled.mm_per_px_y *= 2.0;  // px_per_mv halves, voltages double
    LeadSignalSet a = vectorize(traces, calib, p);
    LeadSignalSet b = vectorize(traces, doubled, p);
    int mid = static_cast<int>((calib.panels[0].t0 + 1.0) * a.fs);
    CHECK(b.leads[0][mid] == Catch::Approx(2.0 * a.leads[0][mid]).epsilon(1e-12));
    CalibrationMeta gain2 = calib;
    gain2.gain *= 2.0;
    LeadSignalSet c = vectorize(traces, gain2, p);
    CHECK(c.leads[0][mid] == Catch::Approx(0.5 * a.leads[0][mid]).epsilon(1e-12));
  }
}

TEST_CASE("ground-truth round trip stays under the clean-page budget") {
  double worst = 0.0;
  for (uint64_t seed : {51u, 52u, 53u, 54u, 55u}) {
    synthgen::PageSample page = clean_page(seed);
    VectorizeParams p;
    BinMask cleaned = binarize_and_clean(mask_as_prob(page.mask), p);
    auto traces = trace_centerlines(cleaned, page.calib, p);
    LeadSignalSet rec = vectorize(traces, page.calib, p);
    for (int l = 0; l < kNumLeads; ++l) {
      const PanelBox& bx = page.calib.panels[l];
      double rmse = signal_rmse(rec, page.signal, l, bx.t0, bx.t1);
      INFO("seed " << seed << " lead " << kLeadNames[l] << " rmse " << rmse);
      REQUIRE(rmse < 0.05);
      worst = std::max(worst, rmse);
    }
  }
  std::printf("clean round trip: worst per-lead rmse %.4f mV\n", worst);
}

TEST_CASE("geometric-only round trip after deskew stays under the looser budget") {
  double worst = 0.0;
  for (uint64_t seed : {61u, 62u}) {
    synthgen::PageSample page = clean_page(seed);
    double angle = seed % 2 ? 1.5 : -2.0;
    GrayImage tilted_img = raster::rotate(page.image, angle, 1.0);
    BinMask tilted_mask = raster::rotate(page.mask, angle);
    double est = raster::estimate_skew(raster::robust_normalize(tilted_img), 3.0, 0.05);
    BinMask recovered = raster::rotate(tilted_mask, est);
    VectorizeParams p;
    BinMask cleaned = binarize_and_clean(mask_as_prob(recovered), p);
    auto traces = trace_centerlines(cleaned, page.calib, p);
    LeadSignalSet rec = vectorize(traces, page.calib, p);
    for (int l = 0; l < kNumLeads; ++l) {
      const PanelBox& bx = page.calib.panels[l];
      double rmse = signal_rmse(rec, page.signal, l, bx.t0, bx.t1);
      INFO("seed " << seed << " angle " << angle << " lead " << kLeadNames[l] << " rmse " << rmse);
      REQUIRE(rmse < 0.15);
      worst = std::max(worst, rmse);
    }
  }
  std::printf("geometric round trip: worst per-lead rmse %.4f mV\n", worst);
}

TEST_CASE("savitzky-golay coefficients and the visualization flag") {
  SECTION("window 5 order 2 matches the hand-solved weights") {
    std::vector<double> w = savgol_coeffs(5, 2);
    std::vector<double> expect{-3.0 / 35, 12.0 / 35, 17.0 / 35, 12.0 / 35, -3.0 / 35};
    REQUIRE(w.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(w[i] == Catch::Approx(expect[i]).margin(1e-12));
  }
  SECTION("weights sum to one and are symmetric") {
    for (auto [win, ord] : {std::pair{9, 3}, {7, 2}, {11, 4}}) {
      std::vector<double> w = savgol_coeffs(win, ord);
      double s = 0.0;
      for (double x : w) s += x;
      CHECK(s == Catch::Approx(1.0).margin(1e-12));
      for (int i = 0; i < win / 2; ++i)
        CHECK(w[i] == Catch::Approx(w[win - 1 - i]).margin(1e-12));
    }
  }
  SECTION("polynomials pass through unchanged, edges included") {
    LeadSignalSet sig(50.0);
    for (int l = 0; l < kNumLeads; ++l)
      for (int i = 0; i < sig.n_samples(); ++i) {
        double t = i / sig.fs;
        sig.leads[l][i] = 0.3 + 0.7 * t - 0.2 * t * t + 0.05 * t * t * t;
      }
    LeadSignalSet viz = smooth_for_viz(sig, 9, 3);
    CHECK(viz.visualization_only);
    for (int i = 0; i < sig.n_samples(); ++i)
      REQUIRE(viz.leads[2][i] == Catch::Approx(sig.leads[2][i]).margin(1e-9));
  }
  SECTION("metrics refuse the smoothed copy") {
    LeadSignalSet sig(100.0);
    LeadSignalSet viz = smooth_for_viz(sig);
    CHECK_THROWS_AS(signal_mse(viz, sig, 0, 0.0, 1.0), std::invalid_argument);
  }
}

TEST_CASE("vectorize parameter scaling is linear in resolution") {
  VectorizeParams p;
  VectorizeParams fine = p.scaled_for(0.125);  // twice the pixels per mm
  CHECK(fine.min_component_area == 24);
  CHECK(fine.open_radius == 2);
  CHECK(fine.max_gap == 12);
  CHECK(fine.band_halfwidth == 24);
  VectorizeParams same = p.scaled_for(0.25);
  CHECK(same.max_gap == p.max_gap);
  CHECK_THROWS_AS(p.scaled_for(0.0), std::invalid_argument);
}

TEST_CASE("digitize_page end to end with a constant model") {
  synthgen::PageSample page = clean_page(71);
  NetConfig cfg;
  cfg.channels = {2, 3, 4};
  ParamVec zeros(make_layout(cfg).total, 0.0);
  VectorizeParams p;
  DigitizeResult r = digitize_page(cfg, zeros, page.image, page.calib, p, 64, 0.25);
  CHECK(r.prob.w == page.image.w);
  CHECK(r.prob.h == page.image.h);
  CHECK(r.mask.w == page.image.w);
  CHECK(r.signal.fs == p.resample_fs);
  // constant prob 0.5 >= tau keeps everything foreground; the traces then sit
  // near their panel baselines and the signal is near zero but covered
  for (int l = 0; l < kNumLeads; ++l) CHECK(r.signal.covered[l]);
}
