#pragma once

// 12-lead signal container, the synthetic waveform generator, CSV exchange,
// and the resampling/smoothing utilities the digitizer relies on.

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "core/io.hpp"
#include "core/rng.hpp"

namespace ecgfed {

inline constexpr int kNumLeads = 12;
inline constexpr double kDurationSec = 10.0;
inline constexpr std::array<const char*, kNumLeads> kLeadNames = {
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"};

inline int lead_index(const std::string& name) {
  for (int i = 0; i < kNumLeads; ++i)
    if (name == kLeadNames[i]) return i;
  return -1;
}

struct LeadSignalSet {
  double fs = 100.0;
  std::array<std::vector<double>, kNumLeads> leads;
  // True where the digitizer actually recovered samples for the lead's
  // rendered window; synthetic ground truth is fully covered.
  std::array<bool, kNumLeads> covered{};
  // Set on smoothed copies produced for display; metric code refuses them.
  bool visualization_only = false;

  LeadSignalSet() = default;
  explicit LeadSignalSet(double fs_hz) : fs(fs_hz) {
    int n = n_samples();
    for (auto& l : leads) l.assign(n, 0.0);
    covered.fill(true);
  }
  int n_samples() const { return static_cast<int>(std::lround(fs * kDurationSec)); }
};

// ---- synthetic 12-lead generator ----
//
// Beat k onset = (k + 0.3 + 0.03*U_k(-1,1)) * (60/hr): independent phase
// jitter per beat, so spacing errors never accumulate and the beat count in
// 10 s is forced by the rate alone. Each beat is a sum of Gaussians (P, Q,
// R, S, T), scaled by a per-beat amplitude jitter and per-lead factors (aVR
// inverted), plus a two-tone baseline wander shared by all leads.

namespace detail {
struct Wave {
  double offset, sigma, amp;  // seconds, seconds, mV
};
inline constexpr std::array<Wave, 5> kBeatWaves = {{
    {-0.160, 0.025, 0.12},   // P
    {-0.048, 0.016, -0.10},  // Q
    {0.000, 0.020, 1.10},    // R
    {0.052, 0.017, -0.22},   // S
    {0.300, 0.055, 0.30},    // T
}};
inline constexpr std::array<double, kNumLeads> kLeadFactor = {
    0.62, 1.00, 0.50, -0.78, 0.40, 0.72, -0.55, 0.90, 1.15, 1.25, 1.05, 0.85};
}  // namespace detail

inline LeadSignalSet synth_waveforms(uint64_t seed, double fs, double hr_bpm) {
  if (fs != 100.0 && fs != 500.0) throw std::invalid_argument("fs in {100,500}");
  if (hr_bpm < 40.0 || hr_bpm > 180.0) throw std::invalid_argument("hr in [40,180]");
  RandStream rng(seed);
  double base = 60.0 / hr_bpm;

  struct Beat {
    double onset, amp;
  };
  std::vector<Beat> beats;
  for (int k = 0;; ++k) {
    double onset = (k + 0.3 + 0.03 * rng.uniform(-1.0, 1.0)) * base;
    double amp = rng.uniform(0.95, 1.05);
    if (onset > kDurationSec + 0.5) break;
    beats.push_back({onset, amp});
  }
  double ph1 = rng.uniform(0.0, 6.283185307179586);
  double ph2 = rng.uniform(0.0, 6.283185307179586);

  LeadSignalSet out(fs);
  int n = out.n_samples();
  std::vector<double> shape(n, 0.0), wander(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double t = i / fs;
    double acc = 0.0;
    for (const Beat& b : beats)
      for (const auto& w : detail::kBeatWaves) {
        double d = t - b.onset - w.offset;
        if (std::abs(d) < 6.0 * w.sigma)
          acc += b.amp * w.amp * std::exp(-0.5 * d * d / (w.sigma * w.sigma));
      }
    shape[i] = acc;
    wander[i] = 0.03 * std::sin(2 * 3.14159265358979323846 * 0.25 * t + ph1) +
                0.02 * std::sin(2 * 3.14159265358979323846 * 0.08 * t + ph2);
  }
  for (int l = 0; l < kNumLeads; ++l)
    for (int i = 0; i < n; ++i) {
      double v = detail::kLeadFactor[l] * shape[i] + wander[i];
      out.leads[l][i] = std::clamp(v, -3.0, 3.0);
    }
  return out;
}

// ---- CSV exchange ----

inline void export_csv_signal(const fs::path& path, const LeadSignalSet& s,
                              const char* time_header = "time") {
  std::string out(time_header);
  for (const char* n : kLeadNames) {
    out += ',';
    out += n;
  }
  out += '\n';
  int n = s.n_samples();
  for (int i = 0; i < n; ++i) {
    out += fmt_double(i / s.fs);
    for (int l = 0; l < kNumLeads; ++l) {
      out += ',';
      out += fmt_double(s.leads[l][i]);
    }
    out += '\n';
  }
  atomic_write_file(path, out);
}

// Accepts a "time" (or "t") column plus the 12 named leads in any order,
// requires strictly monotone time, then resamples (linear interpolation) to
// a uniform grid at the inferred rate, right-padding with zeros to 10 s and
// clipping anything longer. The inferred rate snaps to {100, 500} when the
// median spacing is within 1%; otherwise the nearest of the two is used.
inline LeadSignalSet import_csv_signal(const fs::path& path) {
  auto rows = read_csv(path);
  if (rows.size() < 2) throw std::runtime_error("signal csv: need header + data");
  const auto& hdr = rows[0];
  int time_col = -1;
  std::array<int, kNumLeads> lead_col;
  lead_col.fill(-1);
  for (int c = 0; c < static_cast<int>(hdr.size()); ++c) {
    if (hdr[c] == "time" || hdr[c] == "t") {
      time_col = c;
    } else {
      int li = lead_index(hdr[c]);
      if (li >= 0) lead_col[li] = c;
    }
  }
  if (time_col < 0) throw std::runtime_error("signal csv: missing time column");
  for (int l = 0; l < kNumLeads; ++l)
    if (lead_col[l] < 0)
      throw std::runtime_error(std::string("signal csv: missing lead column ") + kLeadNames[l]);

  size_t nr = rows.size() - 1;
  std::vector<double> t(nr);
  std::array<std::vector<double>, kNumLeads> v;
  for (auto& x : v) x.resize(nr);
  for (size_t i = 0; i < nr; ++i) {
    const auto& row = rows[i + 1];
    t[i] = std::stod(row.at(time_col));
    if (i > 0 && t[i] <= t[i - 1]) throw std::runtime_error("signal csv: non-monotone time");
    for (int l = 0; l < kNumLeads; ++l) v[l][i] = std::stod(row.at(lead_col[l]));
  }

  double fs = 100.0;
  if (nr >= 2) {
    std::vector<double> dt(nr - 1);
    for (size_t i = 0; i + 1 < nr; ++i) dt[i] = t[i + 1] - t[i];
    std::nth_element(dt.begin(), dt.begin() + dt.size() / 2, dt.end());
    double med = dt[dt.size() / 2];
    double raw = med > 0 ? 1.0 / med : 100.0;
    fs = std::abs(raw - 100.0) < std::abs(raw - 500.0) ? 100.0 : 500.0;
  }

  LeadSignalSet out(fs);
  int n = out.n_samples();
  for (int l = 0; l < kNumLeads; ++l) {
    size_t j = 0;
    for (int i = 0; i < n; ++i) {
      double ti = i / fs;
      if (ti < t.front() - 1e-12 || ti > t.back() + 1e-12) continue;  // zero pad
      while (j + 1 < nr && t[j + 1] < ti) ++j;
      if (j + 1 >= nr) {
        out.leads[l][i] = v[l][nr - 1];
      } else {
        double f = (ti - t[j]) / (t[j + 1] - t[j]);
        f = std::clamp(f, 0.0, 1.0);
        out.leads[l][i] = v[l][j] * (1 - f) + v[l][j + 1] * f;
      }
    }
  }
  return out;
}

// ---- natural cubic spline ----

// Interpolates (xs, ys) with a natural cubic spline (second derivative zero
// at both ends); evaluation outside [xs.front(), xs.back()] clamps to the
// endpoint values. xs must be strictly increasing, size >= 2.
class CubicSpline {
 public:
  CubicSpline(std::vector<double> xs, std::vector<double> ys)
      : x_(std::move(xs)), y_(std::move(ys)) {
    size_t n = x_.size();
    if (n < 2 || n != y_.size()) throw std::invalid_argument("spline: need >= 2 knots");
    for (size_t i = 0; i + 1 < n; ++i)
      if (!(x_[i + 1] > x_[i])) throw std::invalid_argument("spline: x not increasing");
    m_.assign(n, 0.0);
    if (n == 2) return;
    // Thomas algorithm on the tridiagonal system for interior second derivs.
    std::vector<double> a(n, 0.0), b(n, 0.0), c(n, 0.0), d(n, 0.0);
    for (size_t i = 1; i + 1 < n; ++i) {
      double h0 = x_[i] - x_[i - 1], h1 = x_[i + 1] - x_[i];
      a[i] = h0;
      b[i] = 2.0 * (h0 + h1);
      c[i] = h1;
      d[i] = 6.0 * ((y_[i + 1] - y_[i]) / h1 - (y_[i] - y_[i - 1]) / h0);
    }
    for (size_t i = 2; i + 1 < n; ++i) {
      double w = a[i] / b[i - 1];
      b[i] -= w * c[i - 1];
      d[i] -= w * d[i - 1];
    }
    for (size_t i = n - 2; i >= 1; --i) {
      m_[i] = (d[i] - c[i] * (i + 2 < n ? m_[i + 1] : 0.0)) / b[i];
      if (i == 1) break;
    }
  }

  double operator()(double x) const {
    size_t n = x_.size();
    if (x <= x_.front()) return y_.front();
    if (x >= x_.back()) return y_.back();
    size_t lo = 0, hi = n - 1;
    while (hi - lo > 1) {
      size_t mid = (lo + hi) / 2;
      (x_[mid] <= x ? lo : hi) = mid;
    }
    double h = x_[lo + 1] - x_[lo];
    double A = (x_[lo + 1] - x) / h, B = (x - x_[lo]) / h;
    return A * y_[lo] + B * y_[lo + 1] +
           ((A * A * A - A) * m_[lo] + (B * B * B - B) * m_[lo + 1]) * h * h / 6.0;
  }

 private:
  std::vector<double> x_, y_, m_;
};

// ---- Savitzky-Golay smoothing ----

// Least-squares smoothing weights for the window center: solve the normal
// equations of a degree-`order` fit on integer abscissae. window odd,
// order < window.
inline std::vector<double> savgol_weights(int window, int order) {
  if (window < 3 || window % 2 == 0 || order < 0 || order >= window)
    throw std::invalid_argument("savgol: window odd >= 3, order < window");
  int half = window / 2, m = order + 1;
  // G = A^T A (Gram matrix of powers), rhs = A^T e_center handled via solving
  // G c = e_0 and then w_j = sum_k c_k j^k.
  std::vector<double> G(m * m, 0.0);
  for (int j = -half; j <= half; ++j) {
    double pj[16];
    pj[0] = 1.0;
    for (int k = 1; k < m; ++k) pj[k] = pj[k - 1] * j;
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < m; ++c) G[r * m + c] += pj[r] * pj[c];
  }
  std::vector<double> rhs(m, 0.0);
  rhs[0] = 1.0;  // value of the fitted polynomial at the window center
  // Gaussian elimination with partial pivoting.
  for (int col = 0; col < m; ++col) {
    int piv = col;
    for (int r = col + 1; r < m; ++r)
      if (std::abs(G[r * m + col]) > std::abs(G[piv * m + col])) piv = r;
    for (int c = 0; c < m; ++c) std::swap(G[col * m + c], G[piv * m + c]);
    std::swap(rhs[col], rhs[piv]);
    double p = G[col * m + col];
    for (int r = 0; r < m; ++r) {
      if (r == col) continue;
      double f = G[r * m + col] / p;
      for (int c = 0; c < m; ++c) G[r * m + c] -= f * G[col * m + c];
      rhs[r] -= f * rhs[col];
    }
  }
  std::vector<double> coef(m);
  for (int k = 0; k < m; ++k) coef[k] = rhs[k] / G[k * m + k];
  std::vector<double> w(window);
  for (int j = -half; j <= half; ++j) {
    double pj = 1.0, acc = 0.0;
    for (int k = 0; k < m; ++k) {
      acc += coef[k] * pj;
      pj *= j;
    }
    w[j + half] = acc;
  }
  return w;
}

// Mirror-padded convolution with the center-point weights.
inline std::vector<double> savgol_smooth(const std::vector<double>& x, int window = 9,
                                         int order = 3) {
  auto w = savgol_weights(window, order);
  int half = window / 2, n = static_cast<int>(x.size());
  std::vector<double> out(x.size(), 0.0);
  if (n == 0) return out;
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = -half; j <= half; ++j) {
      int k = i + j;
      if (k < 0) k = -k;                       // mirror
      if (k >= n) k = 2 * (n - 1) - k;         // mirror
      k = std::clamp(k, 0, n - 1);
      acc += w[j + half] * x[k];
    }
    out[i] = acc;
  }
  return out;
}

// ---- error metrics over rendered windows ----

// MSE between two signal sets for one lead over [t0, t1). Refuses
// visualization-only (smoothed) inputs: display copies never feed metrics.
inline double signal_mse(const LeadSignalSet& a, const LeadSignalSet& b, int lead,
                         double t0, double t1) {
  if (a.visualization_only || b.visualization_only)
    throw std::invalid_argument("visualization-only signals cannot enter metrics");
  if (a.fs != b.fs) throw std::invalid_argument("signal_mse: fs mismatch");
  int i0 = static_cast<int>(std::ceil(t0 * a.fs - 1e-9));
  int i1 = std::min(a.n_samples(), static_cast<int>(std::ceil(t1 * a.fs - 1e-9)));
  i0 = std::max(0, i0);
  double acc = 0.0;
  int cnt = 0;
  for (int i = i0; i < i1; ++i) {
    double d = a.leads[lead][i] - b.leads[lead][i];
    acc += d * d;
    ++cnt;
  }
  return cnt ? acc / cnt : 0.0;
}

inline double signal_rmse(const LeadSignalSet& a, const LeadSignalSet& b, int lead,
                          double t0, double t1) {
  return std::sqrt(signal_mse(a, b, lead, t0, t1));
}

}  // namespace ecgfed
