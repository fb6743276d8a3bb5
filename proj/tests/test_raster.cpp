#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "ecgfed/raster.hpp"
#include "ecgfed/signal.hpp"
#include "ecgfed/synthgen.hpp"

using namespace ecgfed;
using raster::Axis;

namespace {

GrayImage rendered_page(uint64_t seed = 7, double contrast = 0.7) {
  auto sig = synth_waveforms(seed, 100.0, 72.0);
  auto page = synthgen::render_page(sig, synthgen::RenderGeometry{}, contrast, seed);
  return page.image;
}

GrayImage grid_image(int w, int h, int period, double line = 0.3, double bg = 1.0) {
  GrayImage img(w, h, bg);
  for (int x = 0; x < w; x += period)
    for (int y = 0; y < h; ++y) img.at(x, y) = line;
  return img;
}

}  // namespace

TEST_CASE("percentile interpolates linearly") {
  GrayImage img(5, 1);
  for (int i = 0; i < 5; ++i) img.px[i] = i * 0.1;  // 0,.1,.2,.3,.4
  CHECK(raster::percentile(img, 0.0) == Catch::Approx(0.0));
  CHECK(raster::percentile(img, 1.0) == Catch::Approx(0.4));
  CHECK(raster::percentile(img, 0.5) == Catch::Approx(0.2));
  CHECK(raster::percentile(img, 0.625) == Catch::Approx(0.25));
}

TEST_CASE("robust_normalize maps percentile band onto [0,1]") {
  GrayImage img(100, 100);
  for (size_t i = 0; i < img.size(); ++i) img.px[i] = 0.2 + 0.6 * (i / (img.size() - 1.0));
  auto out = raster::robust_normalize(img, 0.01, 0.99);
  CHECK(out.px.front() == Catch::Approx(0.0));
  CHECK(out.px.back() == Catch::Approx(1.0));
  // Affine-invariance of the result: scaling input changes nothing.
  GrayImage img2 = img;
  for (double& v : img2.px) v = v * 0.5 + 0.1;
  auto out2 = raster::robust_normalize(img2, 0.01, 0.99);
  for (size_t i = 0; i < out.size(); i += 997)
    CHECK(out.px[i] == Catch::Approx(out2.px[i]).margin(1e-12));
}

TEST_CASE("robust_normalize of a flat image is 0.5") {
  GrayImage img(16, 16, 0.37);
  auto out = raster::robust_normalize(img, 0.01, 0.99);
  for (double v : out.px) CHECK(v == 0.5);
}

TEST_CASE("rotate round trip approximately restores the interior") {
  // Smooth content: bilinear round trip is accurate. (On raw pages the 1-px
  // grid lines are necessarily smeared by double resampling.)
  GrayImage img = raster::gaussian_blur(rendered_page(), 1.5);
  auto back = raster::rotate(raster::rotate(img, 3.0, 1.0), -3.0, 1.0);
  double err = 0.0, raw_err = 0.0;
  long n = 0;
  GrayImage page = rendered_page();
  auto page_back = raster::rotate(raster::rotate(page, 3.0, 1.0), -3.0, 1.0);
  for (int y = img.h / 4; y < 3 * img.h / 4; ++y)
    for (int x = img.w / 4; x < 3 * img.w / 4; ++x) {
      err += std::abs(back.at(x, y) - img.at(x, y));
      raw_err += std::abs(page_back.at(x, y) - page.at(x, y));
      ++n;
    }
  CHECK(err / n < 0.01);
  CHECK(raw_err / n < 0.08);
}

TEST_CASE("rotate by zero is identity") {
  GrayImage img = rendered_page();
  auto out = raster::rotate(img, 0.0, 1.0);
  for (size_t i = 0; i < img.size(); i += 131) CHECK(out.px[i] == Catch::Approx(img.px[i]));
}

TEST_CASE("gaussian blur: sigma=1 kernel center weight") {
  // Delta image: blurred center value equals the 2-D kernel center weight.
  GrayImage img(9, 9, 0.0);
  img.at(4, 4) = 1.0;
  auto out = raster::gaussian_blur(img, 1.0);
  CHECK(out.at(4, 4) == Catch::Approx(0.1592411257).margin(1e-6));
}

TEST_CASE("gaussian blur preserves constants and handles sigma<=0") {
  GrayImage img(20, 10, 0.42);
  auto out = raster::gaussian_blur(img, 0.8);
  for (double v : out.px) CHECK(v == Catch::Approx(0.42).margin(1e-12));
  auto same = raster::gaussian_blur(img, 0.0);
  CHECK(same.px == img.px);
}

TEST_CASE("add_noise_snr: huge SNR is a near no-op") {
  GrayImage img = rendered_page();
  auto out = raster::add_noise_snr(img, 300.0, 42);
  double maxd = 0.0;
  for (size_t i = 0; i < img.size(); ++i) maxd = std::max(maxd, std::abs(out.px[i] - img.px[i]));
  CHECK(maxd < 1e-6);
}

TEST_CASE("add_noise_snr determinism and zero-power no-op") {
  GrayImage img = rendered_page();
  auto a = raster::add_noise_snr(img, 25.0, 9);
  auto b = raster::add_noise_snr(img, 25.0, 9);
  CHECK(a.px == b.px);
  GrayImage flat(32, 32, 0.5);
  auto c = raster::add_noise_snr(flat, 10.0, 9);
  CHECK(c.px == flat.px);
}

TEST_CASE("add_noise_snr hits the target variance") {
  // Use a mid-gray textured image so clamping at [0,1] never bites.
  GrayImage img(600, 400);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      img.at(x, y) = 0.5 + 0.1 * std::sin(0.1 * x) * std::cos(0.13 * y);
  double mean = 0.0;
  for (double v : img.px) mean += v;
  mean /= img.size();
  double power = 0.0;
  for (double v : img.px) power += (v - mean) * (v - mean);
  power /= img.size();
  double target_var = power / std::pow(10.0, 3.0);  // snr 30 dB
  auto out = raster::add_noise_snr(img, 30.0, 2024);
  double var = 0.0, dmean = 0.0;
  for (size_t i = 0; i < img.size(); ++i) dmean += out.px[i] - img.px[i];
  dmean /= img.size();
  for (size_t i = 0; i < img.size(); ++i) {
    double d = out.px[i] - img.px[i] - dmean;
    var += d * d;
  }
  var /= img.size();
  CHECK(var == Catch::Approx(target_var).epsilon(0.05));
}

TEST_CASE("blockdct at quality 100 is near-lossless") {
  GrayImage img = rendered_page();
  auto out = raster::blockdct_artifacts(img, 100);
  double maxd = 0.0, mse = 0.0;
  for (size_t i = 0; i < img.size(); ++i) {
    double d = std::abs(out.px[i] - img.px[i]);
    maxd = std::max(maxd, d);
    mse += d * d;
  }
  mse /= img.size();
  CHECK(maxd < 0.01);
  double psnr = 10.0 * std::log10(1.0 / std::max(mse, 1e-300));
  CHECK(psnr > 40.0);
}

TEST_CASE("blockdct reconstructs divisible constant blocks exactly") {
  GrayImage img(8, 8, 0.7);
  auto out = raster::blockdct_artifacts(img, 100);
  for (double v : out.px) CHECK(std::abs(v - 0.7) < 1.0 / 255.0);
  // quality 50 => DC quantizer 16; level-shifted value 160-128=32, DC=256=16*16.
  GrayImage img2(8, 8, 160.0 / 255.0);
  auto out2 = raster::blockdct_artifacts(img2, 50);
  for (double v : out2.px) CHECK(std::abs(v - 160.0 / 255.0) < 1.0 / 255.0);
}

TEST_CASE("blockdct degradation is monotone in quality") {
  GrayImage img = rendered_page();
  auto q60 = raster::blockdct_artifacts(img, 60);
  auto q90 = raster::blockdct_artifacts(img, 90);
  double d60 = 0.0, d90 = 0.0;
  for (size_t i = 0; i < img.size(); ++i) {
    d60 += std::abs(q60.px[i] - img.px[i]);
    d90 += std::abs(q90.px[i] - img.px[i]);
  }
  CHECK(d60 > d90);
}

TEST_CASE("morph_open removes specks and thin strokes, keeps blocks") {
  BinMask m(40, 40, 0);
  m.at(5, 5) = 1;                                   // isolated pixel
  for (int x = 10; x < 30; ++x) m.at(x, 35) = 1;    // 1-px horizontal line
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) m.at(x, y) = 1;   // 20x20 block
  auto out = raster::morph_open(m, 1);
  CHECK(out.at(5, 5) == 0);
  CHECK(out.at(15, 35) == 0);
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) CHECK(out.at(x, y) == 1);
}

TEST_CASE("morph_open is idempotent") {
  RandStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    BinMask m(24, 24);
    for (auto& v : m.px) v = rng.u01() < 0.4 ? 1 : 0;
    auto once = raster::morph_open(m, 1);
    auto twice = raster::morph_open(once, 1);
    CHECK(twice.px == once.px);
  }
}

TEST_CASE("geodesic_close_x bridges only small horizontal gaps") {
  BinMask m(30, 5, 0);
  for (int x = 2; x < 10; ++x) m.at(x, 2) = 1;
  for (int x = 13; x < 20; ++x) m.at(x, 2) = 1;  // 3-px gap at 10,11,12
  auto out = raster::geodesic_close_x(m, 4);
  for (int x = 2; x < 20; ++x) CHECK(out.at(x, 2) == 1);

  BinMask m2(30, 5, 0);
  for (int x = 2; x < 10; ++x) m2.at(x, 2) = 1;
  for (int x = 15; x < 20; ++x) m2.at(x, 2) = 1;  // 5-px gap
  auto out2 = raster::geodesic_close_x(m2, 4);
  CHECK(out2.px == m2.px);
}

TEST_CASE("geodesic_close_x leaves connected curves alone") {
  // V shape: both edges meet at the apex, so the row gaps inside the V are
  // not breaks and must not be filled
  BinMask v(16, 8, 0);
  for (int d = 0; d < 6; ++d) {
    v.at(7 - d, 1 + d) = 1;
    v.at(8 + d, 1 + d) = 1;
  }
  auto out = raster::geodesic_close_x(v, 6);
  CHECK(out.px == v.px);
  // cut the apex: now the two edges are separate components and the row
  // gaps become bridgeable breaks
  BinMask cut = v;
  cut.at(7, 1) = cut.at(8, 1) = 0;
  auto out2 = raster::geodesic_close_x(cut, 6);
  CHECK(out2.count() > cut.count());
}

TEST_CASE("geodesic_close_x never bridges across rows") {
  BinMask m(10, 20, 0);
  for (int x = 0; x < 10; ++x) {
    m.at(x, 3) = 1;
    m.at(x, 10) = 1;  // 6-row vertical gap
  }
  auto out = raster::geodesic_close_x(m, 8);
  CHECK(out.px == m.px);
}

namespace {
// Independent brute-force flood fill (4x4 exhaustive oracle).
BinMask brute_remove_small(const BinMask& m, long min_area) {
  BinMask out = m;
  std::vector<int> label(m.size(), -1);
  int next = 0;
  for (size_t s = 0; s < m.size(); ++s) {
    if (!m.px[s] || label[s] >= 0) continue;
    // naive repeated relaxation flood fill
    label[s] = next;
    bool changed = true;
    while (changed) {
      changed = false;
      for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
          int i = y * m.w + x;
          if (!m.px[i] || label[i] != next) continue;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              int nx = x + dx, ny = y + dy;
              if (nx < 0 || nx >= m.w || ny < 0 || ny >= m.h) continue;
              int ni = ny * m.w + nx;
              if (m.px[ni] && label[ni] < 0) {
                label[ni] = next;
                changed = true;
              }
            }
        }
    }
    ++next;
  }
  std::vector<long> area(next, 0);
  for (size_t i = 0; i < m.size(); ++i)
    if (m.px[i]) ++area[label[i]];
  for (size_t i = 0; i < m.size(); ++i)
    if (m.px[i] && area[label[i]] < min_area) out.px[i] = 0;
  return out;
}
}  // namespace

TEST_CASE("remove_small_components basics") {
  BinMask m(10, 10, 0);
  m.at(1, 1) = m.at(2, 1) = m.at(2, 2) = 1;  // 3-px component
  auto out = raster::remove_small_components(m, 4);
  CHECK(out.count() == 0);
  auto keep = raster::remove_small_components(m, 3);
  CHECK(keep.px == m.px);
}

TEST_CASE("remove_small_components matches the flood-fill oracle on all 4x4 masks") {
  for (uint32_t bits = 0; bits < 65536; ++bits) {
    BinMask m(4, 4);
    for (int i = 0; i < 16; ++i) m.px[i] = (bits >> i) & 1;
    for (long min_area : {2L, 3L}) {
      auto fast = raster::remove_small_components(m, min_area);
      auto slow = brute_remove_small(m, min_area);
      REQUIRE(fast.px == slow.px);
    }
  }
}

TEST_CASE("remove_small_components matches oracle on random 32x32 masks") {
  RandStream rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    BinMask m(32, 32);
    for (auto& v : m.px) v = rng.u01() < 0.35 ? 1 : 0;
    auto fast = raster::remove_small_components(m, 12);
    auto slow = brute_remove_small(m, 12);
    REQUIRE(fast.px == slow.px);
  }
}

TEST_CASE("estimate_grid_period finds synthetic and rendered periods") {
  auto est = raster::estimate_grid_period(grid_image(200, 50, 10), Axis::X, 3, 30);
  REQUIRE(est.has_value());
  CHECK(*est == Catch::Approx(10.0).margin(0.5));

  GrayImage white(200, 50, 1.0);
  CHECK_FALSE(raster::estimate_grid_period(white, Axis::X, 3, 30).has_value());

  GrayImage page = rendered_page();
  auto gp = raster::estimate_grid_period(page, Axis::X, 2, 12);
  REQUIRE(gp.has_value());
  CHECK(std::abs(*gp - 4.0) <= 1.0);  // 1 mm at 4 px/mm
  auto gpy = raster::estimate_grid_period(page, Axis::Y, 2, 12);
  REQUIRE(gpy.has_value());
  CHECK(std::abs(*gpy - 4.0) <= 1.0);
}

TEST_CASE("estimate_grid_period prefers the fundamental over harmonics") {
  auto est = raster::estimate_grid_period(grid_image(400, 30, 10), Axis::X, 3, 45);
  REQUIRE(est.has_value());
  CHECK(*est == Catch::Approx(10.0).margin(0.5));
}

TEST_CASE("estimate_grid_period is affine-intensity invariant") {
  GrayImage g = grid_image(300, 40, 8, 0.4, 0.9);
  GrayImage g2 = g;
  for (double& v : g2.px) v = 0.5 * v + 0.05;
  auto a = raster::estimate_grid_period(g, Axis::X, 3, 30);
  auto b = raster::estimate_grid_period(g2, Axis::X, 3, 30);
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(*a == Catch::Approx(*b).margin(1e-9));
}

TEST_CASE("estimate_skew recovers applied page rotation") {
  GrayImage page = rendered_page();
  CHECK(std::abs(raster::estimate_skew(page, 3.0, 0.25)) <= 0.25);
  auto rot = raster::rotate(page, 2.0, 1.0);
  double est = raster::estimate_skew(rot, 3.0, 0.25);
  CHECK(est == Catch::Approx(-2.0).margin(0.25 + 1e-9));
}

TEST_CASE("estimate_skew of a blank page is 0") {
  GrayImage blank(200, 100, 1.0);
  CHECK(raster::estimate_skew(blank, 3.0, 0.5) == 0.0);
}

TEST_CASE("raster ops are pure (repeat-call determinism)") {
  GrayImage page = rendered_page();
  CHECK(raster::blockdct_artifacts(page, 80).px == raster::blockdct_artifacts(page, 80).px);
  CHECK(raster::gaussian_blur(page, 0.7).px == raster::gaussian_blur(page, 0.7).px);
  CHECK(raster::rotate(page, 1.3, 1.0).px == raster::rotate(page, 1.3, 1.0).px);
}
