#pragma once
// Central Gaussian mechanism on the decoded aggregate plus Renyi-DP accounting:
// per-round RDP alpha/(2 sigma^2), additive composition across rounds, and
// conversion to (epsilon, delta) by minimizing over an alpha grid with
// golden-section refinement. Includes the inverse (sigma calibration).
//
// Sensitivity convention: noise stddev is sigma*C on the weighted aggregate
// (worst-case per-client contribution bounded by C since w_k <= 1). This is
// conservative and deliberate.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgfed/core/rng.hpp"

namespace ecgfed {

struct DpConfig {
  double sigma = 0.6;
  double C = 1.0;
  double delta = 1e-5;
  bool enabled = false;
};

// RDP of the Gaussian mechanism with sensitivity-to-noise ratio 1/sigma.
inline double rdp_of_gaussian(double sigma, double alpha) {
  if (!(alpha > 1.0)) throw std::invalid_argument("rdp_of_gaussian: alpha must be > 1");
  if (!(sigma > 0.0)) throw std::invalid_argument("rdp_of_gaussian: sigma must be > 0");
  return alpha / (2.0 * sigma * sigma);
}

// {1.25, 1.5, 1.75, 2} U {2.5, ..., 6 step 0.5} U {7..16 step 1}
// U {18..32 step 2} U {36..64 step 4}.
inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (double a = 1.25; a < 2.249; a += 0.25) g.push_back(a);
  for (double a = 2.5; a < 6.249; a += 0.5) g.push_back(a);
  for (double a = 7.0; a < 16.5; a += 1.0) g.push_back(a);
  for (double a = 18.0; a < 33.0; a += 2.0) g.push_back(a);
  for (double a = 36.0; a < 65.0; a += 4.0) g.push_back(a);
  return g;
}

// Append-only record of the mechanism invocations; cumulative RDP per grid
// order is nondecreasing in rounds by construction.
struct PrivacyLedger {
  std::vector<double> alpha_grid = default_alpha_grid();
  std::vector<double> cum_rdp = std::vector<double>(default_alpha_grid().size(), 0.0);
  std::vector<double> sigma_history;
  std::vector<double> c_history;

  std::size_t rounds_applied() const { return sigma_history.size(); }

  void record_round(double sigma, double C) {
    for (std::size_t i = 0; i < alpha_grid.size(); ++i)
      cum_rdp[i] += rdp_of_gaussian(sigma, alpha_grid[i]);
    sigma_history.push_back(sigma);
    c_history.push_back(C);
  }

  // Composed RDP at an arbitrary order (linear in alpha for the Gaussian).
  double rdp_at(double alpha) const {
    double s = 0;
    for (double sg : sigma_history) s += rdp_of_gaussian(sg, alpha);
    return s;
  }

  nlohmann::json to_json() const {
    return {{"rounds_applied", rounds_applied()},
            {"sigma_history", sigma_history},
            {"c_history", c_history},
            {"alpha_grid", alpha_grid},
            {"cum_rdp", cum_rdp}};
  }
};

struct EpsilonResult {
  double epsilon = 0;
  double alpha = 0;  // optimizing order
};

// epsilon(delta) = min_alpha [ RDP(alpha) + ln(1/delta)/(alpha-1) ], minimized
// over the grid and then refined by golden-section search around the grid
// argmin (the objective is strictly convex on (1, inf)). When the argmin is
// the last grid point the bracket expands geometrically so the continuum
// optimum is still captured (needed for very large sigma).
inline EpsilonResult compose_and_convert(const PrivacyLedger& ledger, double delta) {
  if (ledger.rounds_applied() == 0)
    throw std::invalid_argument("compose_and_convert: empty ledger");
  if (!(delta > 0.0 && delta < 1.0))
    throw std::invalid_argument("compose_and_convert: delta must be in (0,1)");
  const double L = std::log(1.0 / delta);
  auto f = [&](double alpha) { return ledger.rdp_at(alpha) + L / (alpha - 1.0); };

  const auto& grid = ledger.alpha_grid;
  std::size_t best = 0;
  double fbest = f(grid[0]);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    double v = f(grid[i]);
    if (v < fbest) { fbest = v; best = i; }
  }
  double lo = best == 0 ? 1.0 + 1e-12 : grid[best - 1];
  double hi;
  if (best + 1 < grid.size()) {
    hi = grid[best + 1];
  } else {
    hi = grid.back();
    double step = grid.back() - grid[grid.size() - 2];
    while (f(hi + step) < f(hi) && hi < 1e12) { hi += step; step *= 2.0; }
    hi += step;
  }
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 200 && (b - a) > 1e-12 * (1.0 + b); ++it) {
    if (f1 <= f2) { b = x2; x2 = x1; f2 = f1; x1 = b - phi * (b - a); f1 = f(x1); }
    else { a = x1; x1 = x2; f1 = f2; x2 = a + phi * (b - a); f2 = f(x2); }
  }
  double amid = 0.5 * (a + b), fmid = f(amid);
  EpsilonResult r;
  if (fmid <= fbest) { r.epsilon = fmid; r.alpha = amid; }
  else { r.epsilon = fbest; r.alpha = grid[best]; }
  return r;
}

// Uniform-sigma convenience: R rounds at a common noise multiplier.
inline EpsilonResult compose_and_convert(double sigma, std::size_t rounds, double delta) {
  PrivacyLedger led;
  for (std::size_t r = 0; r < rounds; ++r) led.record_round(sigma, 1.0);
  return compose_and_convert(led, delta);
}

// Bisection on sigma in [0.1, 100] for the target epsilon; epsilon is strictly
// decreasing in sigma so the bracket is valid iff the target lies between the
// endpoint values.
inline double calibrate_sigma(double target_eps, double delta, std::size_t rounds) {
  if (!(target_eps > 0)) throw std::invalid_argument("calibrate_sigma: target must be > 0");
  double lo = 0.1, hi = 100.0;
  double eps_lo = compose_and_convert(lo, rounds, delta).epsilon;   // largest eps
  double eps_hi = compose_and_convert(hi, rounds, delta).epsilon;   // smallest eps
  if (target_eps > eps_lo || target_eps < eps_hi)
    throw std::invalid_argument(
        "calibrate_sigma: target epsilon " + std::to_string(target_eps) +
        " unreachable in sigma bracket [0.1, 100]: eps(0.1)=" + std::to_string(eps_lo) +
        ", eps(100)=" + std::to_string(eps_hi));
  for (int it = 0; it < 500; ++it) {
    double mid = 0.5 * (lo + hi);
    double e = compose_and_convert(mid, rounds, delta).epsilon;
    if (std::fabs(e - target_eps) <= 1e-6 * target_eps) return mid;
    if (e > target_eps) lo = mid;  // need more noise
    else hi = mid;
  }
  throw std::runtime_error("calibrate_sigma: bisection failed to converge");
}

// Adds i.i.d. N(0, (sigma*C)^2) per element (seeded Box-Muller via RandStream)
// and advances the ledger by exactly one round. The caller must invoke this
// once per committed round, after masked-sum decode and before the aggregator
// update; fedcore asserts that pairing against its round records.
inline std::vector<double> add_central_noise(const std::vector<double>& aggregate,
                                             const DpConfig& cfg, std::uint64_t seed,
                                             PrivacyLedger& ledger) {
  if (!cfg.enabled)
    throw std::logic_error("add_central_noise: mechanism invoked while disabled");
  if (!(cfg.sigma > 0) || !(cfg.delta > 0 && cfg.delta < 1))
    throw std::invalid_argument("add_central_noise: invalid DpConfig");
  RandStream rs(seed);
  std::vector<double> out = aggregate;
  double sd = cfg.sigma * cfg.C;
  for (double& x : out) x += sd * rs.normal();
  ledger.record_round(cfg.sigma, cfg.C);
  return out;
}

}  // namespace ecgfed
