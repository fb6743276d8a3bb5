#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "ecgfed/signal.hpp"

using namespace ecgfed;

namespace {
fs::path tmpdir() {
  auto p = fs::temp_directory_path() / "ecgfed_test_signal";
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("synth_waveforms is deterministic") {
  auto a = synth_waveforms(99, 100.0, 72.0);
  auto b = synth_waveforms(99, 100.0, 72.0);
  for (int l = 0; l < kNumLeads; ++l) CHECK(a.leads[l] == b.leads[l]);
}

TEST_CASE("synth_waveforms: hr 60 gives exactly 10 beats in 10 s") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 17ULL, 123456ULL}) {
    auto s = synth_waveforms(seed, 500.0, 60.0);
    // Count R peaks on lead II: local maxima above 0.5 mV.
    const auto& v = s.leads[1];
    std::vector<double> peaks;
    for (size_t i = 1; i + 1 < v.size(); ++i)
      if (v[i] > 0.5 && v[i] >= v[i - 1] && v[i] > v[i + 1]) peaks.push_back(i / s.fs);
    REQUIRE(peaks.size() == 10);
    for (size_t i = 1; i < peaks.size(); ++i) {
      CHECK(peaks[i] - peaks[i - 1] > 1.0 - 0.07);
      CHECK(peaks[i] - peaks[i - 1] < 1.0 + 0.07);
    }
  }
}

TEST_CASE("synth_waveforms bounded by +-3 mV over 1000 seeds") {
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    auto s = synth_waveforms(seed, 100.0, 40.0 + (seed % 140));
    for (int l = 0; l < kNumLeads; ++l)
      for (double v : s.leads[l]) {
        REQUIRE(v <= 3.0);
        REQUIRE(v >= -3.0);
      }
  }
}

TEST_CASE("synth_waveforms QRS slope is steep") {
  auto s = synth_waveforms(5, 500.0, 75.0);
  const auto& v = s.leads[1];
  double max_slope = 0.0;
  for (size_t i = 1; i < v.size(); ++i)
    max_slope = std::max(max_slope, std::abs(v[i] - v[i - 1]) * s.fs);
  CHECK(max_slope >= 20.0);
}

TEST_CASE("synth_waveforms rejects bad domains") {
  CHECK_THROWS_AS(synth_waveforms(1, 250.0, 60.0), std::invalid_argument);
  CHECK_THROWS_AS(synth_waveforms(1, 100.0, 20.0), std::invalid_argument);
  CHECK_THROWS_AS(synth_waveforms(1, 100.0, 200.0), std::invalid_argument);
}

TEST_CASE("csv export/import round trip is exact") {
  auto s = synth_waveforms(7, 100.0, 80.0);
  auto path = tmpdir() / "sig.csv";
  export_csv_signal(path, s);
  auto r = import_csv_signal(path);
  CHECK(r.fs == s.fs);
  for (int l = 0; l < kNumLeads; ++l) {
    REQUIRE(r.leads[l].size() == s.leads[l].size());
    for (size_t i = 0; i < r.leads[l].size(); ++i)
      CHECK(r.leads[l][i] == s.leads[l][i]);  // shortest round-trip doubles
  }
}

TEST_CASE("csv import pads short and clips long recordings") {
  auto path = tmpdir() / "short.csv";
  std::string csv = "time";
  for (const char* n : kLeadNames) csv += std::string(",") + n;
  csv += "\n";
  for (int i = 0; i < 800; ++i) {  // 8 s at 100 Hz
    csv += fmt_double(i / 100.0);
    for (int l = 0; l < kNumLeads; ++l) csv += ",1.5";
    csv += "\n";
  }
  atomic_write_file(path, csv);
  auto r = import_csv_signal(path);
  CHECK(r.fs == 100.0);
  CHECK(r.leads[0][799] == 1.5);
  for (int i = 800; i < r.n_samples(); ++i) CHECK(r.leads[0][i] == 0.0);

  auto path2 = tmpdir() / "long.csv";
  std::string csv2 = "time";
  for (const char* n : kLeadNames) csv2 += std::string(",") + n;
  csv2 += "\n";
  for (int i = 0; i < 1200; ++i) {  // 12 s
    csv2 += fmt_double(i / 100.0);
    for (int l = 0; l < kNumLeads; ++l) csv2 += ",0.25";
    csv2 += "\n";
  }
  atomic_write_file(path2, csv2);
  auto r2 = import_csv_signal(path2);
  CHECK(r2.n_samples() == 1000);
  CHECK(r2.leads[5].size() == 1000);
  CHECK(r2.leads[5].back() == 0.25);
}

TEST_CASE("csv import rejects malformed inputs by name") {
  auto path = tmpdir() / "bad.csv";
  atomic_write_file(path, "time,I,II\n0,1,1\n0.01,1,1\n");
  try {
    import_csv_signal(path);
    FAIL("expected rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("III") != std::string::npos);
  }

  std::string csv = "time";
  for (const char* n : kLeadNames) csv += std::string(",") + n;
  csv += "\n0,0,0,0,0,0,0,0,0,0,0,0,0\n0,0,0,0,0,0,0,0,0,0,0,0,0\n";
  atomic_write_file(path, csv);
  CHECK_THROWS_AS(import_csv_signal(path), std::runtime_error);
}

TEST_CASE("cubic spline interpolates knots and linear data") {
  std::vector<double> xs = {0, 1, 2, 3, 5};
  std::vector<double> ys = {1, 3, 2, 4, 0};
  CubicSpline sp(xs, ys);
  for (size_t i = 0; i < xs.size(); ++i) CHECK(sp(xs[i]) == Catch::Approx(ys[i]).margin(1e-12));

  std::vector<double> lx = {0, 1, 2, 4, 7};
  std::vector<double> ly;
  for (double x : lx) ly.push_back(2.0 * x - 1.0);
  CubicSpline lin(lx, ly);
  for (double x = 0.0; x <= 7.0; x += 0.37)
    CHECK(lin(x) == Catch::Approx(2.0 * x - 1.0).margin(1e-9));
}

TEST_CASE("cubic spline clamps outside the knot range") {
  CubicSpline sp({0.0, 1.0, 2.0}, {5.0, 6.0, 7.0});
  CHECK(sp(-3.0) == 5.0);
  CHECK(sp(10.0) == 7.0);
}

TEST_CASE("savgol weights match closed forms") {
  auto w5 = savgol_weights(5, 2);
  std::vector<double> exp5 = {-3.0 / 35, 12.0 / 35, 17.0 / 35, 12.0 / 35, -3.0 / 35};
  for (int i = 0; i < 5; ++i) CHECK(w5[i] == Catch::Approx(exp5[i]).margin(1e-12));

  auto w9 = savgol_weights(9, 3);
  std::vector<double> exp9 = {-21.0 / 231, 14.0 / 231, 39.0 / 231, 54.0 / 231, 59.0 / 231,
                              54.0 / 231,  39.0 / 231, 14.0 / 231, -21.0 / 231};
  for (int i = 0; i < 9; ++i) CHECK(w9[i] == Catch::Approx(exp9[i]).margin(1e-12));
}

TEST_CASE("savgol smoothing reproduces cubics in the interior") {
  std::vector<double> x(50);
  for (int i = 0; i < 50; ++i) {
    double t = i * 0.1;
    x[i] = 0.3 * t * t * t - t * t + 2.0 * t - 0.5;
  }
  auto y = savgol_smooth(x, 9, 3);
  for (int i = 4; i < 46; ++i) CHECK(y[i] == Catch::Approx(x[i]).margin(1e-9));
}

TEST_CASE("signal_mse computes windowed error and rejects viz copies") {
  LeadSignalSet a(100.0), b(100.0);
  for (int i = 0; i < a.n_samples(); ++i) {
    a.leads[0][i] = 1.0;
    b.leads[0][i] = i < 500 ? 1.0 : 2.0;
  }
  CHECK(signal_mse(a, b, 0, 0.0, 5.0) == Catch::Approx(0.0).margin(1e-15));
  CHECK(signal_mse(a, b, 0, 5.0, 10.0) == Catch::Approx(1.0));
  b.visualization_only = true;
  CHECK_THROWS_AS(signal_mse(a, b, 0, 0.0, 10.0), std::invalid_argument);
}
