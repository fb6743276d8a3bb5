#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ecgfed/dpcore.hpp"

using namespace ecgfed;

namespace {

// Closed form for R rounds at one sigma: S + 2*sqrt(S*L), S = R/(2 sigma^2),
// L = ln(1/delta); optimum alpha* = 1 + sqrt(L/S).
double closed_form_eps(double sigma, double R, double delta) {
  double S = R / (2.0 * sigma * sigma), L = std::log(1.0 / delta);
  return S + 2.0 * std::sqrt(S * L);
}

}  // namespace

TEST_CASE("rdp_of_gaussian formula") {
  CHECK(rdp_of_gaussian(1.0, 2.0) == 1.0);
  CHECK(rdp_of_gaussian(0.6, 2.0) == Catch::Approx(2.0 / 0.72).epsilon(1e-15));
  for (double a : {1.5, 3.0, 7.0})
    CHECK(rdp_of_gaussian(0.8, 2 * a) == Catch::Approx(2 * rdp_of_gaussian(0.8, a)).epsilon(1e-15));
  CHECK_THROWS(rdp_of_gaussian(0.6, 1.0));
  CHECK_THROWS(rdp_of_gaussian(0.0, 2.0));
}

TEST_CASE("compose_and_convert matches the pre-registered oracle values") {
  // Frozen by an independent scalar-minimization script before this module
  // was written (scipy bounded minimization + closed-form cross-check).
  struct Case { double sigma; std::size_t R; double delta; double eps; double alpha; };
  const Case cases[] = {
      {0.6, 100, 1e-5, 218.864320758690, 1.287911555},
      {1.0, 1, std::exp(-10.0), 4.972135955000, 5.472135955},
      {0.6, 30, 1e-5, 85.471014747974, 1.525652177},
      {0.6, 1, 1e-5, 9.386432075869, 0.0},
      {1.0, 100, 1e-5, 97.985259121881, 0.0},
      {2.0, 10, 1e-6, 9.561290681346, 0.0},
      {0.5, 50, 1e-8, 185.838641051574, 0.0},
  };
  for (const auto& c : cases) {
    auto r = compose_and_convert(c.sigma, c.R, c.delta);
    INFO("sigma=" << c.sigma << " R=" << c.R << " delta=" << c.delta);
    CHECK(std::fabs(r.epsilon - c.eps) < 1e-9);
    if (c.alpha > 0) CHECK(r.alpha == Catch::Approx(c.alpha).epsilon(1e-6));
  }
}

TEST_CASE("accountant equals the closed form within 1e-9 across a sweep") {
  int checked = 0;
  for (double sigma : {0.3, 0.6, 1.0, 2.0, 5.0}) {
    for (std::size_t R : {std::size_t{1}, std::size_t{30}, std::size_t{100}, std::size_t{500}}) {
      double delta = (checked % 2 == 0) ? 1e-5 : 1e-7;
      auto r = compose_and_convert(sigma, R, delta);
      REQUIRE(std::fabs(r.epsilon - closed_form_eps(sigma, static_cast<double>(R), delta)) < 1e-9);
      ++checked;
    }
  }
  CHECK(checked == 20);
}

TEST_CASE("refinement follows the optimum beyond the last grid point") {
  // sigma = 100, R = 1: continuum optimum near alpha = 480, far past 64.
  auto r = compose_and_convert(100.0, 1, 1e-5);
  CHECK(std::fabs(r.epsilon - closed_form_eps(100.0, 1.0, 1e-5)) < 1e-9);
  CHECK(r.alpha > 100.0);
}

TEST_CASE("epsilon monotonicity") {
  double base = compose_and_convert(0.6, 30, 1e-5).epsilon;
  CHECK(compose_and_convert(0.9, 30, 1e-5).epsilon < base);      // more noise, less eps
  CHECK(compose_and_convert(0.6, 60, 1e-5).epsilon > base);      // more rounds, more eps
  CHECK(compose_and_convert(0.6, 30, 1e-3).epsilon < base);      // looser delta, less eps
  // doubling rounds strictly increases epsilon
  for (std::size_t R : {std::size_t{1}, std::size_t{5}, std::size_t{25}})
    CHECK(compose_and_convert(0.6, 2 * R, 1e-5).epsilon > compose_and_convert(0.6, R, 1e-5).epsilon);
}

TEST_CASE("ledger with heterogeneous sigmas composes additively") {
  PrivacyLedger led;
  led.record_round(0.6, 1.0);
  led.record_round(0.9, 1.0);
  led.record_round(1.3, 1.0);
  CHECK(led.rounds_applied() == 3);
  double S = 1.0 / (2 * 0.36) + 1.0 / (2 * 0.81) + 1.0 / (2 * 1.69);
  double L = std::log(1e5);
  double expect = S + 2 * std::sqrt(S * L);
  auto r = compose_and_convert(led, 1e-5);
  CHECK(std::fabs(r.epsilon - expect) < 1e-9);
  // cumulative RDP nondecreasing in rounds at every grid order
  PrivacyLedger led2;
  led2.record_round(0.6, 1.0);
  auto snap = led2.cum_rdp;
  led2.record_round(2.0, 1.0);
  for (std::size_t i = 0; i < snap.size(); ++i) REQUIRE(led2.cum_rdp[i] > snap[i]);
}

TEST_CASE("compose_and_convert rejects bad inputs") {
  PrivacyLedger empty;
  CHECK_THROWS(compose_and_convert(empty, 1e-5));
  CHECK_THROWS(compose_and_convert(0.6, 10, 0.0));
  CHECK_THROWS(compose_and_convert(0.6, 10, 1.0));
}

TEST_CASE("calibrate_sigma") {
  SECTION("round-trips the forward accountant to 1e-6 relative") {
    for (double target : {5.0, 85.471014747974, 400.0}) {
      double s = calibrate_sigma(target, 1e-5, 30);
      double back = compose_and_convert(s, 30, 1e-5).epsilon;
      REQUIRE(std::fabs(back - target) <= 1e-6 * target);
    }
  }
  SECTION("single-round inversion recovers sigma = 0.6") {
    double target = compose_and_convert(0.6, 1, 1e-5).epsilon;
    double s = calibrate_sigma(target, 1e-5, 1);
    CHECK(std::fabs(s - 0.6) < 1e-4);
  }
  SECTION("more rounds at fixed epsilon need more noise") {
    CHECK(calibrate_sigma(50.0, 1e-5, 50) > calibrate_sigma(50.0, 1e-5, 10));
  }
  SECTION("unreachable targets are rejected with the bracket endpoints") {
    CHECK_THROWS_WITH(calibrate_sigma(1e9, 1e-5, 1),
                      Catch::Matchers::ContainsSubstring("bracket"));
    CHECK_THROWS(calibrate_sigma(1e-9, 1e-5, 1));
  }
}

TEST_CASE("add_central_noise") {
  DpConfig cfg;
  cfg.enabled = true;  // sigma 0.6, C 1.0, delta 1e-5 defaults
  SECTION("disabled mechanism refuses") {
    DpConfig off;
    PrivacyLedger led;
    CHECK_THROWS(add_central_noise({0.0}, off, 1, led));
  }
  SECTION("same seed, same noise; ledger advances once per call") {
    PrivacyLedger led;
    std::vector<double> agg(100, 0.25);
    auto a = add_central_noise(agg, cfg, 99, led);
    auto b = add_central_noise(agg, cfg, 99, led);
    CHECK(a == b);
    CHECK(led.rounds_applied() == 2);
    CHECK(led.sigma_history == std::vector<double>{0.6, 0.6});
  }
  SECTION("empirical stddev within 1% of 0.6 over 1e6 elements") {
    PrivacyLedger led;
    std::vector<double> zeros(1000000, 0.0);
    auto noisy = add_central_noise(zeros, cfg, 4242, led);
    double m = 0;
    for (double x : noisy) m += x;
    m /= static_cast<double>(noisy.size());
    double ss = 0;
    for (double x : noisy) ss += (x - m) * (x - m);
    double sd = std::sqrt(ss / (static_cast<double>(noisy.size()) - 1));
    CHECK(std::fabs(sd - 0.6) < 0.006);
  }
  SECTION("distinct seeds give uncorrelated noise") {
    PrivacyLedger led;
    std::vector<double> zeros(1000000, 0.0);
    auto a = add_central_noise(zeros, cfg, 1001, led);
    auto b = add_central_noise(zeros, cfg, 1002, led);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) { ma += a[i]; mb += b[i]; }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += (a[i] - ma) * (b[i] - mb);
      va += (a[i] - ma) * (a[i] - ma);
      vb += (b[i] - mb) * (b[i] - mb);
    }
    CHECK(std::fabs(num / std::sqrt(va * vb)) < 0.01);
  }
  SECTION("ledger serializes for the run manifest") {
    PrivacyLedger led;
    led.record_round(0.6, 1.0);
    auto j = led.to_json();
    CHECK(j["rounds_applied"] == 1);
    CHECK(j["sigma_history"].size() == 1);
    CHECK(j["alpha_grid"].size() == j["cum_rdp"].size());
  }
}
