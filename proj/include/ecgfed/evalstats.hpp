#pragma once
// Segmentation/signal metrics, weighted aggregation, and inferential statistics:
// client-stratified paired BCa bootstrap, Hedges' g, paired t-tests with Holm
// step-down correction. Special functions (normal quantile/CDF, regularized
// incomplete beta/gamma) are implemented here so results are portable without a
// statistics library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecgfed/core/image.hpp"
#include "ecgfed/core/rng.hpp"
#include "ecgfed/signal.hpp"

namespace ecgfed {

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------
namespace special {

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Acklam's rational approximation followed by one Halley refinement step;
// absolute error well below 1e-9 over (0,1).
inline double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw std::invalid_argument("norm_quantile: p outside [0,1]");
  }
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley step on f(x) = Phi(x) - p.
  double e = norm_cdf(x) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x -= u / (1.0 + 0.5 * x * u);
  return x;
}

namespace detail {
inline double betacf(double a, double b, double x) {
  const double fpmin = 1e-300, eps = 3e-16;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 400; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}
}  // namespace detail

// Regularized incomplete beta I_x(a,b) via modified Lentz continued fraction.
inline double ibeta_reg(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
               a * std::log(x) + b * std::log1p(-x);
  double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
  return 1.0 - bt * detail::betacf(b, a, 1.0 - x) / b;
}

// Regularized lower incomplete gamma P(a,x): series for x < a+1, continued
// fraction for the complement otherwise.
inline double igamma_reg_lower(double a, double x) {
  if (x <= 0.0) return 0.0;
  if (a <= 0.0) throw std::invalid_argument("igamma_reg_lower: a <= 0");
  double lpre = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    double sum = 1.0 / a, term = sum;
    for (int n = 1; n <= 1000; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * 3e-16) break;
    }
    return sum * std::exp(lpre);
  }
  const double fpmin = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / fpmin, d = 1.0 / b, h = d;
  for (int i = 1; i <= 1000; ++i) {
    double an = -static_cast<double>(i) * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = b + an / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 3e-16) break;
  }
  return 1.0 - std::exp(lpre) * h;
}

inline double chi2_cdf(double x, double k) { return igamma_reg_lower(0.5 * k, 0.5 * x); }

// Two-sided Student-t p-value with nu degrees of freedom.
inline double t_two_sided_p(double t, double nu) {
  return ibeta_reg(0.5 * nu, 0.5, nu / (nu + t * t));
}

}  // namespace special

// ---------------------------------------------------------------------------
// Mask metrics
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string record_id;
  int client = 0;
  std::string method;
  std::uint64_t seed = 0;
  double dice = 0, iou = 0, precision = 0, recall = 0, specificity = 0;
  double bce = 0, mask_mse = 0;
  std::array<double, 12> signal_mse{};  // mV^2, NaN-free; unfilled stays 0
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
};

inline ConfusionCounts confusion(const BinMask& pred, const BinMask& gt) {
  if (pred.w != gt.w || pred.h != gt.h)
    throw std::invalid_argument("confusion: dimension mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    bool p = pred.px[i] != 0, g = gt.px[i] != 0;
    if (p && g) ++c.tp;
    else if (p && !g) ++c.fp;
    else if (!p && g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// All metrics are exact integer-count arithmetic followed by one division.
// 0/0 conventions: dice/iou/precision/recall -> 1 on empty-empty, else 0;
// specificity with no ground-truth negatives is vacuously 1.
// BCE treats the binary prediction as a probability clamped at eps = 1e-7.
inline MetricRow mask_metrics(const BinMask& pred, const BinMask& gt) {
  ConfusionCounts c = confusion(pred, gt);
  MetricRow r;
  bool empty_empty = (c.tp + c.fp + c.fn) == 0;
  auto ratio = [&](std::uint64_t num, std::uint64_t den) {
    if (den == 0) return empty_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  r.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  r.precision = (c.tp + c.fp == 0) ? (empty_empty ? 1.0 : 0.0)
                                   : static_cast<double>(c.tp) / (c.tp + c.fp);
  r.recall = (c.tp + c.fn == 0) ? (empty_empty ? 1.0 : 0.0)
                                : static_cast<double>(c.tp) / (c.tp + c.fn);
  r.specificity = (c.tn + c.fp == 0) ? 1.0
                                     : static_cast<double>(c.tn) / (c.tn + c.fp);
  double hw = static_cast<double>(c.total());
  r.mask_mse = static_cast<double>(c.fp + c.fn) / hw;
  const double eps = 1e-7;
  double miss = -std::log(eps), hit = -std::log1p(-eps);
  r.bce = (static_cast<double>(c.fp + c.fn) * miss +
           static_cast<double>(c.tp + c.tn) * hit) / hw;
  return r;
}

// Probability-map variant: counts are taken at threshold 0.5; BCE uses the
// actual probabilities (clamped at eps).
inline MetricRow mask_metrics(const GrayImage& prob, const BinMask& gt) {
  if (prob.w != gt.w || prob.h != gt.h)
    throw std::invalid_argument("mask_metrics: dimension mismatch");
  BinMask pred(prob.w, prob.h);
  for (std::size_t i = 0; i < prob.px.size(); ++i) pred.px[i] = prob.px[i] >= 0.5 ? 1 : 0;
  MetricRow r = mask_metrics(pred, gt);
  const double eps = 1e-7;
  double acc = 0;
  for (std::size_t i = 0; i < prob.px.size(); ++i) {
    double p = std::clamp(prob.px[i], eps, 1.0 - eps);
    acc += gt.px[i] ? -std::log(p) : -std::log1p(-p);
  }
  r.bce = acc / static_cast<double>(prob.px.size());
  return r;
}

// ---------------------------------------------------------------------------
// Weighted aggregation
// ---------------------------------------------------------------------------

// Sum_k n_k * mean_k / Sum_k n_k over per-client means.
inline double weighted_global(const std::vector<double>& client_means,
                              const std::vector<double>& weights) {
  if (client_means.size() != weights.size() || client_means.empty())
    throw std::invalid_argument("weighted_global: size mismatch");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] > 0)) throw std::invalid_argument("weighted_global: weights must be > 0");
    num += weights[i] * client_means[i];
    den += weights[i];
  }
  return num / den;
}

// ---------------------------------------------------------------------------
// BCa bootstrap
// ---------------------------------------------------------------------------

struct CiResult {
  double point = 0, lower = 0, upper = 0;
  double level = 0.95;
  std::uint64_t B = 10000;  // 0 = exhaustive enumeration was used
  double z0 = 0, acceleration = 0;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Order-statistic quantile: k = clamp(ceil(alpha*B), 1, B), 1-based on the
// ascending-sorted replicate statistics.
inline double order_stat(const std::vector<double>& sorted_stats, double alpha) {
  auto B = static_cast<std::int64_t>(sorted_stats.size());
  auto k = static_cast<std::int64_t>(std::ceil(alpha * static_cast<double>(B)));
  k = std::clamp<std::int64_t>(k, 1, B);
  return sorted_stats[static_cast<std::size_t>(k - 1)];
}

// Plain percentile interval at the given level, using the same quantile rule.
inline std::pair<double, double> percentile_quantiles(
    const std::vector<double>& sorted_stats, double level) {
  double alpha = 1.0 - level;
  return {order_stat(sorted_stats, alpha / 2.0),
          order_stat(sorted_stats, 1.0 - alpha / 2.0)};
}

// Maps (z0, a) to the BCa quantile levels and reads them off the sorted
// replicates. When z0 == 0 and a == 0 this delegates to percentile_quantiles
// (skipping the Phi(Phi^-1(.)) round trip) so the reduction to the plain
// percentile interval is bit-for-bit.
inline std::pair<double, double> bca_quantiles(const std::vector<double>& sorted_stats,
                                               double z0, double a, double level) {
  double alpha = 1.0 - level;
  double a1, a2;
  if (z0 == 0.0 && a == 0.0) {
    return percentile_quantiles(sorted_stats, level);
  } else {
    double zlo = special::norm_quantile(alpha / 2.0);
    double zhi = special::norm_quantile(1.0 - alpha / 2.0);
    a1 = special::norm_cdf(z0 + (z0 + zlo) / (1.0 - a * (z0 + zlo)));
    a2 = special::norm_cdf(z0 + (z0 + zhi) / (1.0 - a * (z0 + zhi)));
  }
  return {order_stat(sorted_stats, a1), order_stat(sorted_stats, a2)};
}

}  // namespace detail

// Client-stratified paired BCa bootstrap of the pooled mean of per-page values
// (for paired comparisons, pass per-page differences; resampling the diffs with
// shared indices is exactly the paired resample). strata[i] labels page i's
// client. B > 0: seeded Monte Carlo with per-replicate derived seeds. B == 0:
// exhaustive enumeration of all stratified resamples (tiny n only).
// Acceleration comes from a jackknife over pages pooled across strata.
inline CiResult bca_ci(const std::vector<double>& values, const std::vector<int>& strata,
                       std::uint64_t B = 10000, double level = 0.95,
                       std::uint64_t seed = 0) {
  if (values.size() != strata.size() || values.empty())
    throw std::invalid_argument("bca_ci: size mismatch");
  // Group page indices by stratum.
  std::vector<int> labels(strata);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  if (labels.size() < 2) throw std::invalid_argument("bca_ci: need >= 2 strata");
  std::vector<std::vector<std::size_t>> groups(labels.size());
  for (std::size_t i = 0; i < strata.size(); ++i) {
    auto g = static_cast<std::size_t>(
        std::lower_bound(labels.begin(), labels.end(), strata[i]) - labels.begin());
    groups[g].push_back(i);
  }
  for (const auto& g : groups)
    if (g.size() < 2) throw std::invalid_argument("bca_ci: need >= 2 pages per stratum");

  const auto n = static_cast<double>(values.size());
  double point = 0;
  for (double v : values) point += v;
  point /= n;

  CiResult res;
  res.point = res.lower = res.upper = point;
  res.level = level;
  res.B = B;

  bool degenerate = std::all_of(values.begin(), values.end(),
                                [&](double v) { return v == values.front(); });
  if (degenerate) return res;  // CI collapses to the point

  std::vector<double> stats;
  if (B == 0) {
    // Exhaustive enumeration: odometer over index tuples per stratum.
    std::size_t total = 1;
    for (const auto& g : groups) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (total > 10'000'000 / g.size())
          throw std::invalid_argument("bca_ci: exhaustive mode too large");
        total *= g.size();
      }
    }
    stats.reserve(total);
    std::vector<std::vector<std::size_t>> odo(groups.size());
    for (std::size_t s = 0; s < groups.size(); ++s) odo[s].assign(groups[s].size(), 0);
    std::vector<double> gsum(groups.size());
    auto stratum_sum = [&](std::size_t s) {
      double acc = 0;
      for (std::size_t slot = 0; slot < groups[s].size(); ++slot)
        acc += values[groups[s][odo[s][slot]]];
      return acc;
    };
    for (std::size_t s = 0; s < groups.size(); ++s) gsum[s] = stratum_sum(s);
    while (true) {
      double tot = 0;
      for (double x : gsum) tot += x;
      stats.push_back(tot / n);
      // increment odometer
      std::size_t s = 0, slot = 0;
      for (;;) {
        if (s == groups.size()) break;
        if (++odo[s][slot] < groups[s].size()) {
          gsum[s] = stratum_sum(s);
          break;
        }
        odo[s][slot] = 0;
        gsum[s] = stratum_sum(s);
        if (++slot == groups[s].size()) { slot = 0; ++s; }
      }
      if (s == groups.size()) break;
    }
  } else {
    stats.reserve(B);
    for (std::uint64_t b = 0; b < B; ++b) {
      RandStream rs(derive_seed(seed, "bca", {b}));
      double acc = 0;
      for (const auto& g : groups)
        for (std::size_t slot = 0; slot < g.size(); ++slot)
          acc += values[g[rs.uniform_int(g.size())]];
      stats.push_back(acc / n);
    }
  }

  // Bias correction z0 from the fraction of replicates strictly below the point.
  std::size_t below = 0;
  for (double s : stats)
    if (s < point) ++below;
  double frac = static_cast<double>(below) / static_cast<double>(stats.size());
  if (frac == 0.0 || frac == 1.0)
    throw std::runtime_error("bca_ci: bias correction undefined (all replicates on one side)");
  double z0 = special::norm_quantile(frac);

  // Acceleration from the pooled jackknife over pages.
  std::vector<double> jk(values.size());
  double total_sum = point * n;
  for (std::size_t i = 0; i < values.size(); ++i)
    jk[i] = (total_sum - values[i]) / (n - 1.0);
  double jkm = detail::mean_of(jk);
  double num = 0, den = 0;
  for (double j : jk) {
    double d = jkm - j;
    num += d * d * d;
    den += d * d;
  }
  double a = 0;
  if (den > 0) a = num / (6.0 * std::pow(den, 1.5));

  std::sort(stats.begin(), stats.end());
  auto [lo, hi] = detail::bca_quantiles(stats, z0, a, level);
  res.lower = lo;
  res.upper = hi;
  res.z0 = z0;
  res.acceleration = a;
  return res;
}

// ---------------------------------------------------------------------------
// Effect size and paired tests
// ---------------------------------------------------------------------------

// Hedges' g on paired differences: g = J * mean(d)/sd(d), J = 1 - 3/(4(n-1)-1),
// sd with n-1 denominator. Zero sd is rejected (undefined effect size).
inline double hedges_g_paired(const std::vector<double>& diffs) {
  std::size_t n = diffs.size();
  if (n < 2) throw std::invalid_argument("hedges_g_paired: need n >= 2");
  // All-equal input has zero sd in exact arithmetic even when the floating
  // mean does not cancel exactly; detect it before the FP computation.
  if (std::all_of(diffs.begin(), diffs.end(),
                  [&](double d) { return d == diffs.front(); }))
    throw std::invalid_argument("hedges_g_paired: zero sd, effect size undefined");
  double m = detail::mean_of(diffs);
  double ss = 0;
  for (double d : diffs) ss += (d - m) * (d - m);
  double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0)) throw std::invalid_argument("hedges_g_paired: zero sd, effect size undefined");
  double J = 1.0 - 3.0 / (4.0 * static_cast<double>(n - 1) - 1.0);
  return J * m / sd;
}

struct PairTestResult {
  std::optional<double> t;  // empty when sd == 0 (undefined)
  std::optional<double> p;
  bool reject = false;
};

// Holm step-down on p-values (smaller-is-stronger): sort ascending, reject
// while p_(i) <= alpha/(m-i+1), stop at the first failure. Undefined p-values
// (nullopt) are never rejected and do not participate in the ordering.
inline std::vector<bool> holm_decide(const std::vector<std::optional<double>>& ps,
                                     double alpha = 0.05) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].has_value()) idx.push_back(i);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return *ps[a] < *ps[b]; });
  std::vector<bool> reject(ps.size(), false);
  std::size_t m = idx.size();
  for (std::size_t i = 0; i < m; ++i) {
    double thr = alpha / static_cast<double>(m - i);
    if (*ps[idx[i]] <= thr) reject[idx[i]] = true;
    else break;
  }
  return reject;
}

// Paired t-tests over several method pairs with Holm correction. Each entry of
// `diffs_per_pair` holds the per-example paired differences for one pair.
inline std::vector<PairTestResult> paired_t_holm(
    const std::vector<std::vector<double>>& diffs_per_pair, double alpha = 0.05) {
  std::vector<PairTestResult> out(diffs_per_pair.size());
  std::vector<std::optional<double>> ps(diffs_per_pair.size());
  for (std::size_t k = 0; k < diffs_per_pair.size(); ++k) {
    const auto& d = diffs_per_pair[k];
    if (d.size() < 2) throw std::invalid_argument("paired_t_holm: need n >= 2 per pair");
    if (std::all_of(d.begin(), d.end(), [&](double x) { return x == d.front(); }))
      continue;  // zero sd in exact arithmetic: undefined, left as nullopt
    double n = static_cast<double>(d.size());
    double m = detail::mean_of(d);
    double ss = 0;
    for (double x : d) ss += (x - m) * (x - m);
    double sd = std::sqrt(ss / (n - 1.0));
    if (!(sd > 0)) continue;  // undefined, left as nullopt and flagged unrejected
    double t = m / (sd / std::sqrt(n));
    out[k].t = t;
    ps[k] = special::t_two_sided_p(t, n - 1.0);
    out[k].p = ps[k];
  }
  auto rej = holm_decide(ps, alpha);
  for (std::size_t k = 0; k < out.size(); ++k) out[k].reject = rej[k];
  return out;
}

// ---------------------------------------------------------------------------
// Signal metrics
// ---------------------------------------------------------------------------

inline LeadSignalSet resample_to(const LeadSignalSet& s, double fs) {
  if (s.fs == fs) return s;
  LeadSignalSet out;
  out.fs = fs;
  out.visualization_only = s.visualization_only;
  out.covered = s.covered;
  int n = out.n_samples(), m = s.n_samples();
  for (int l = 0; l < kNumLeads; ++l) {
    out.leads[l].assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
      double t = i / fs, u = t * s.fs;
      int j = std::clamp(static_cast<int>(std::floor(u)), 0, m - 1);
      int j1 = std::min(j + 1, m - 1);
      double f = u - j;
      out.leads[l][i] = s.leads[l][j] * (1.0 - f) + s.leads[l][j1] * f;
    }
  }
  return out;
}

// Per-lead MSE in mV^2 over the full record; pred is resampled to gt's rate
// first. Refuses smoothed (visualization-only) inputs via signal_mse.
inline std::array<double, 12> lead_mse_all(const LeadSignalSet& pred,
                                           const LeadSignalSet& gt) {
  LeadSignalSet p = resample_to(pred, gt.fs);
  std::array<double, 12> out{};
  for (int l = 0; l < kNumLeads; ++l) out[l] = signal_mse(p, gt, l, 0.0, kDurationSec);
  return out;
}

}  // namespace ecgfed
