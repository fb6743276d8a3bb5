#pragma once

// Compact encoder-decoder page segmenter on CHW double tensors.
//
// Topology (three levels, skip connections, one auxiliary head):
//   enc0 : conv3x3 s1 (1 -> c0) + instance norm + leaky relu      full res
//   down1: conv3x3 s2 (c0 -> c1) + IN + lrelu                     1/2 res
//   down2: conv3x3 s2 (c1 -> c2) + IN + lrelu                     1/4 res
//   dec1 : nearest-up x2, concat [up, enc1], conv3x3 s1 -> c1     1/2 res
//   dec0 : nearest-up x2, concat [up, enc0], conv3x3 s1 -> c0     full res
//   out  : conv1x1 (c0 -> 1) logits
//   aux  : conv1x1 (c1 -> 1) logits off dec1 (deep supervision)
//
// Loss per head: mean binary cross-entropy on logits plus
// lambda_dice * (1 - soft Dice); heads are blended with the deep-supervision
// weights and the auxiliary target is the 2x2 average-pooled mask. Gradients
// are exact reverse-mode; the leaky-relu subgradient at exactly zero takes the
// negative-side slope (forward tracks min |preactivation| so gradient checks
// can resample configurations that sit on the kink).
//
// Every parameter lives in one flat vector ordered by the named tensor layout
// so optimizer state, clipping, masking, and checkpoints all address the same
// coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ecgfed/conv_kernels.hpp"
#include "ecgfed/core/image.hpp"
#include "ecgfed/core/rng.hpp"

namespace ecgfed {

struct NetConfig {
  std::array<int, 3> channels{8, 16, 32};
  int patch = 128;  // training patch side; any H,W divisible by 4 works
  int batch = 2;
  double lrelu_slope = 0.01;
  double in_eps = 1e-5;
  double ds_main = 1.0, ds_aux = 0.5;  // deep-supervision blend weights
  double lambda_dice = 1.0;
  double dice_eps = 1.0;
};

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0, count = 0;
};

struct ParamLayout {
  std::vector<TensorSpec> tensors;
  std::size_t total = 0;

  const TensorSpec& at(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::out_of_range("no tensor named " + std::string(name));
  }
};

using ParamVec = std::vector<double>;

inline ParamLayout make_layout(const NetConfig& cfg) {
  const int c0 = cfg.channels[0], c1 = cfg.channels[1], c2 = cfg.channels[2];
  if (c0 < 1 || c1 < 1 || c2 < 1) throw std::invalid_argument("channel counts must be positive");
  ParamLayout L;
  auto add = [&L](std::string name, std::vector<int> shape) {
    TensorSpec t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.count = 1;
    for (int d : t.shape) t.count *= static_cast<std::size_t>(d);
    t.offset = L.total;
    L.total += t.count;
    L.tensors.push_back(std::move(t));
  };
  auto add_block = [&](const std::string& base, int cout, int cin) {
    add(base + ".w", {cout, cin, 3, 3});
    add(base + ".b", {cout});
    add(base + ".g", {cout});
    add(base + ".beta", {cout});
  };
  add_block("enc0", c0, 1);
  add_block("down1", c1, c0);
  add_block("down2", c2, c1);
  add_block("dec1", c1, c2 + c1);
  add_block("dec0", c0, c1 + c0);
  add("out.w", {1, c0, 1, 1});
  add("out.b", {1});
  add("aux.w", {1, c1, 1, 1});
  add("aux.b", {1});
  return L;
}

// He-normal weights (std = sqrt(2 / fan_in)), zero biases and shifts, unit
// scales. Draw order follows the layout so the result is seed-stable.
inline ParamVec init_params(const NetConfig& cfg, uint64_t seed) {
  ParamLayout L = make_layout(cfg);
  ParamVec p(L.total, 0.0);
  RandStream rs(derive_seed(seed, "init"));
  for (const auto& t : L.tensors) {
    if (t.name.size() > 2 && t.name.compare(t.name.size() - 2, 2, ".w") == 0) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= static_cast<std::size_t>(t.shape[d]);
      double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < t.count; ++i) p[t.offset + i] = rs.normal(0.0, sd);
    } else if (t.name.size() > 2 && t.name.compare(t.name.size() - 2, 2, ".g") == 0) {
      for (std::size_t i = 0; i < t.count; ++i) p[t.offset + i] = 1.0;
    }
  }
  return p;
}

namespace detail {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// Stride-1 conv on unpacked weights; packed fast path when Cout % 4 == 0.
inline void conv_s1_any(const double* xpad, int cin, int H, int W, const double* w, int cout,
                        double* y, std::vector<double>& scratch_wpack) {
  if (cout % 4 == 0) {
    scratch_wpack.resize(static_cast<std::size_t>(cout) * cin * 9);
    convk::pack_fwd(w, cout, cin, scratch_wpack.data());
    convk::conv3x3_s1(xpad, cin, H, W, scratch_wpack.data(), cout, y);
  } else {
    convk::conv3x3_s1_ref(xpad, cin, H, W, w, cout, y);
  }
}

inline void dgrad_s1_any(const double* dy, int cout, int H, int W, const double* w, int cin,
                         double* dx, std::vector<double>& scratch_pad,
                         std::vector<double>& scratch_w) {
  if (cin % 4 == 0) {
    convk::dgrad3x3_s1(dy, cout, H, W, w, cin, dx, scratch_pad, scratch_w);
    return;
  }
  scratch_pad.resize(static_cast<std::size_t>(cout) * (H + 2) * (W + 2));
  convk::pad1(dy, cout, H, W, scratch_pad.data());
  scratch_w.resize(static_cast<std::size_t>(cin) * cout * 9);
  for (int ci = 0; ci < cin; ++ci)
    for (int co = 0; co < cout; ++co)
      for (int k = 0; k < 9; ++k)
        scratch_w[(static_cast<std::size_t>(ci) * cout + co) * 9 + k] =
            w[(static_cast<std::size_t>(co) * cin + ci) * 9 + (8 - k)];
  convk::conv3x3_s1_ref(scratch_pad.data(), cout, H, W, scratch_w.data(), cin, dx);
}

// One conv + instance-norm + leaky-relu block's forward record.
struct BlockCache {
  int C = 0, H = 0, W = 0;
  std::vector<double> z;        // conv output (pre-norm)
  std::vector<double> xhat;     // normalized
  std::vector<double> inv_std;  // per channel
  std::vector<double> e;        // activation (block output)
};

struct BlockParams {
  const double* w;
  const double* b;
  const double* g;
  const double* beta;
};

inline BlockParams block_params(const ParamLayout& L, const ParamVec& p, const std::string& base) {
  return {p.data() + L.at(base + ".w").offset, p.data() + L.at(base + ".b").offset,
          p.data() + L.at(base + ".g").offset, p.data() + L.at(base + ".beta").offset};
}

// Bias + instance norm + leaky relu on a freshly written conv output.
inline void norm_act(BlockCache& bc, const BlockParams& bp, const NetConfig& cfg,
                     double& min_abs_preact, double& min_channel_var) {
  const std::size_t n = static_cast<std::size_t>(bc.H) * bc.W;
  bc.xhat.resize(bc.z.size());
  bc.e.resize(bc.z.size());
  bc.inv_std.resize(bc.C);
  for (int c = 0; c < bc.C; ++c) {
    double* z = bc.z.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i) z[i] += bp.b[c];
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += z[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = z[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    min_channel_var = std::min(min_channel_var, var);
    double is = 1.0 / std::sqrt(var + cfg.in_eps);
    bc.inv_std[c] = is;
    double* xh = bc.xhat.data() + static_cast<std::size_t>(c) * n;
    double* e = bc.e.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i) {
      double x = (z[i] - mu) * is;
      xh[i] = x;
      double a = bp.g[c] * x + bp.beta[c];
      min_abs_preact = std::min(min_abs_preact, std::fabs(a));
      e[i] = a > 0.0 ? a : cfg.lrelu_slope * a;
    }
  }
}

// Backward through lrelu + instance norm + bias given de (grad wrt bc.e).
// Writes dz (grad wrt the raw conv output) and accumulates db/dg/dbeta.
inline void norm_act_bwd(const BlockCache& bc, const BlockParams& bp, const NetConfig& cfg,
                         const double* de, double* dz, double* db, double* dg, double* dbeta) {
  const std::size_t n = static_cast<std::size_t>(bc.H) * bc.W;
  for (int c = 0; c < bc.C; ++c) {
    const double* ec = bc.e.data() + static_cast<std::size_t>(c) * n;
    const double* xh = bc.xhat.data() + static_cast<std::size_t>(c) * n;
    const double* dec = de + static_cast<std::size_t>(c) * n;
    double* dzc = dz + static_cast<std::size_t>(c) * n;
    double sum_da = 0.0, sum_daxh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double da = dec[i] * (ec[i] > 0.0 ? 1.0 : cfg.lrelu_slope);
      dzc[i] = da;  // temporarily da; rescaled below
      sum_da += da;
      sum_daxh += da * xh[i];
    }
    dbeta[c] += sum_da;
    dg[c] += sum_daxh;
    const double is = bc.inv_std[c];
    const double gm = bp.g[c];
    const double m1 = gm * sum_da / static_cast<double>(n);
    const double m2 = gm * sum_daxh / static_cast<double>(n);
    double sum_dz = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double v = is * (gm * dzc[i] - m1 - xh[i] * m2);
      dzc[i] = v;
      sum_dz += v;
    }
    db[c] += sum_dz;
  }
}

inline void upsample2(const double* x, int C, int H, int W, double* y) {
  for (int c = 0; c < C; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * H * W;
    double* yc = y + static_cast<std::size_t>(c) * (2 * H) * (2 * W);
    for (int i = 0; i < 2 * H; ++i)
      for (int j = 0; j < 2 * W; ++j) yc[static_cast<std::size_t>(i) * 2 * W + j] = xc[static_cast<std::size_t>(i / 2) * W + j / 2];
  }
}

// Adjoint of nearest-neighbour x2 upsampling: 2x2 sum pooling.
inline void sumpool2(const double* dy, int C, int H2, int W2, double* dx) {
  const int H = H2 / 2, W = W2 / 2;
  for (int c = 0; c < C; ++c) {
    const double* dyc = dy + static_cast<std::size_t>(c) * H2 * W2;
    double* dxc = dx + static_cast<std::size_t>(c) * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        dxc[static_cast<std::size_t>(i) * W + j] =
            dyc[static_cast<std::size_t>(2 * i) * W2 + 2 * j] +
            dyc[static_cast<std::size_t>(2 * i) * W2 + 2 * j + 1] +
            dyc[static_cast<std::size_t>(2 * i + 1) * W2 + 2 * j] +
            dyc[static_cast<std::size_t>(2 * i + 1) * W2 + 2 * j + 1];
  }
}

struct ForwardCache {
  int H = 0, W = 0;
  std::vector<double> x;  // input as [1][H][W]
  BlockCache enc0, down1, down2, dec1, dec0;
  std::vector<double> cat1, cat0;    // decoder conv inputs
  std::vector<double> z_main, z_aux; // logits
  double min_abs_preact = std::numeric_limits<double>::infinity();
  double min_channel_var = std::numeric_limits<double>::infinity();
};

inline void pad_into(const std::vector<double>& x, int C, int H, int W, std::vector<double>& xp) {
  xp.resize(static_cast<std::size_t>(C) * (H + 2) * (W + 2));
  convk::pad1(x.data(), C, H, W, xp.data());
}

inline void forward_pass(const NetConfig& cfg, const ParamLayout& L, const ParamVec& params,
                         const GrayImage& img, ForwardCache& fc) {
  if (img.w <= 0 || img.h <= 0 || img.w % 4 != 0 || img.h % 4 != 0)
    throw std::invalid_argument("input sides must be positive multiples of 4");
  if (params.size() != L.total) throw std::invalid_argument("parameter vector size mismatch");
  const int c0 = cfg.channels[0], c1 = cfg.channels[1], c2 = cfg.channels[2];
  const int H = img.h, W = img.w, H2 = H / 2, W2 = W / 2, H4 = H / 4, W4 = W / 4;
  fc.H = H;
  fc.W = W;
  fc.min_abs_preact = std::numeric_limits<double>::infinity();
  fc.x.assign(img.px.begin(), img.px.end());

  std::vector<double> xpad, wpack;

  auto run_block_s1 = [&](BlockCache& bc, const std::string& base, const std::vector<double>& in,
                          int cin, int h, int w, int cout) {
    BlockParams bp = block_params(L, params, base);
    bc.C = cout;
    bc.H = h;
    bc.W = w;
    bc.z.resize(static_cast<std::size_t>(cout) * h * w);
    pad_into(in, cin, h, w, xpad);
    conv_s1_any(xpad.data(), cin, h, w, bp.w, cout, bc.z.data(), wpack);
    norm_act(bc, bp, cfg, fc.min_abs_preact, fc.min_channel_var);
  };
  auto run_block_s2 = [&](BlockCache& bc, const std::string& base, const std::vector<double>& in,
                          int cin, int h, int w, int cout) {
    BlockParams bp = block_params(L, params, base);
    bc.C = cout;
    bc.H = h / 2;
    bc.W = w / 2;
    bc.z.resize(static_cast<std::size_t>(cout) * bc.H * bc.W);
    pad_into(in, cin, h, w, xpad);
    convk::conv3x3_s2(xpad.data(), cin, h, w, bp.w, cout, bc.z.data());
    norm_act(bc, bp, cfg, fc.min_abs_preact, fc.min_channel_var);
  };

  run_block_s1(fc.enc0, "enc0", fc.x, 1, H, W, c0);
  run_block_s2(fc.down1, "down1", fc.enc0.e, c0, H, W, c1);
  run_block_s2(fc.down2, "down2", fc.down1.e, c1, H2, W2, c2);

  fc.cat1.resize(static_cast<std::size_t>(c2 + c1) * H2 * W2);
  upsample2(fc.down2.e.data(), c2, H4, W4, fc.cat1.data());
  std::copy(fc.down1.e.begin(), fc.down1.e.end(),
            fc.cat1.begin() + static_cast<std::size_t>(c2) * H2 * W2);
  run_block_s1(fc.dec1, "dec1", fc.cat1, c2 + c1, H2, W2, c1);

  fc.cat0.resize(static_cast<std::size_t>(c1 + c0) * H * W);
  upsample2(fc.dec1.e.data(), c1, H2, W2, fc.cat0.data());
  std::copy(fc.enc0.e.begin(), fc.enc0.e.end(),
            fc.cat0.begin() + static_cast<std::size_t>(c1) * H * W);
  run_block_s1(fc.dec0, "dec0", fc.cat0, c1 + c0, H, W, c0);

  const double* ow = params.data() + L.at("out.w").offset;
  const double ob = params[L.at("out.b").offset];
  fc.z_main.assign(static_cast<std::size_t>(H) * W, ob);
  for (int c = 0; c < c0; ++c) {
    const double* ec = fc.dec0.e.data() + static_cast<std::size_t>(c) * H * W;
    for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) fc.z_main[i] += ow[c] * ec[i];
  }
  const double* aw = params.data() + L.at("aux.w").offset;
  const double ab = params[L.at("aux.b").offset];
  fc.z_aux.assign(static_cast<std::size_t>(H2) * W2, ab);
  for (int c = 0; c < c1; ++c) {
    const double* ec = fc.dec1.e.data() + static_cast<std::size_t>(c) * H2 * W2;
    for (std::size_t i = 0; i < static_cast<std::size_t>(H2) * W2; ++i) fc.z_aux[i] += aw[c] * ec[i];
  }
}

// Per-head loss on logits z vs target m (m may be soft for the aux head):
//   mean stable BCE + lambda * (1 - (2*sum(p*m)+eps)/(sum p + sum m + eps)).
// Appends d(head loss)/dz scaled by `weight` into dz when dz != nullptr.
struct HeadLoss {
  double bce = 0.0, dice = 0.0;  // dice term is (1 - soft dice)
};

inline HeadLoss head_loss(const std::vector<double>& z, const std::vector<double>& m,
                          double lambda, double eps, double weight, std::vector<double>* dz) {
  const std::size_t n = z.size();
  HeadLoss out;
  double sum_p = 0.0, sum_m = 0.0, sum_pm = 0.0, bce = 0.0;
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) {
    double zi = z[i], mi = m[i];
    p[i] = sigmoid(zi);
    bce += std::max(zi, 0.0) - zi * mi + std::log1p(std::exp(-std::fabs(zi)));
    sum_p += p[i];
    sum_m += mi;
    sum_pm += p[i] * mi;
  }
  bce /= static_cast<double>(n);
  const double A = 2.0 * sum_pm + eps, B = sum_p + sum_m + eps;
  out.bce = bce;
  out.dice = 1.0 - A / B;
  if (dz) {
    dz->resize(n);
    const double invn = 1.0 / static_cast<double>(n), B2 = B * B;
    for (std::size_t i = 0; i < n; ++i) {
      double dd = (2.0 * m[i] * B - A) / B2;          // dDice/dp_i
      double g = (p[i] - m[i]) * invn - lambda * dd * p[i] * (1.0 - p[i]);
      (*dz)[i] = weight * g;
    }
  }
  return out;
}

}  // namespace detail

struct ForwardResult {
  GrayImage prob;      // full-resolution foreground probability
  GrayImage prob_aux;  // half-resolution auxiliary head
};

inline ForwardResult forward_probs(const NetConfig& cfg, const ParamVec& params,
                                   const GrayImage& img) {
  ParamLayout L = make_layout(cfg);
  detail::ForwardCache fc;
  detail::forward_pass(cfg, L, params, img, fc);
  ForwardResult r;
  r.prob = GrayImage(fc.W, fc.H);
  for (std::size_t i = 0; i < fc.z_main.size(); ++i) r.prob.px[i] = detail::sigmoid(fc.z_main[i]);
  r.prob_aux = GrayImage(fc.W / 2, fc.H / 2);
  for (std::size_t i = 0; i < fc.z_aux.size(); ++i) r.prob_aux.px[i] = detail::sigmoid(fc.z_aux[i]);
  return r;
}

struct LossBreakdown {
  double total = 0.0;
  double bce_main = 0.0, dice_main = 0.0;
  double bce_aux = 0.0, dice_aux = 0.0;
  // Forward regularity probes: smallest |lrelu preactivation| and smallest
  // per-channel variance. Gradient checks screen on these so finite-difference
  // probes never straddle the activation kink or a near-singular norm.
  double min_abs_preact = 0.0;
  double min_channel_var = 0.0;
};

namespace detail {

inline std::vector<double> mask_to_double(const BinMask& m) {
  std::vector<double> out(m.px.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.px[i] ? 1.0 : 0.0;
  return out;
}

inline std::vector<double> avgpool2_mask(const BinMask& m) {
  const int H = m.h / 2, W = m.w / 2;
  std::vector<double> out(static_cast<std::size_t>(H) * W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      out[static_cast<std::size_t>(i) * W + j] =
          0.25 * (m.at(2 * j, 2 * i) + m.at(2 * j + 1, 2 * i) + m.at(2 * j, 2 * i + 1) +
                  m.at(2 * j + 1, 2 * i + 1));
  return out;
}

inline LossBreakdown losses_from_cache(const NetConfig& cfg, const ForwardCache& fc,
                                       const BinMask& mask, std::vector<double>* dz_main,
                                       std::vector<double>* dz_aux) {
  const double wsum = cfg.ds_main + cfg.ds_aux;
  HeadLoss main = head_loss(fc.z_main, mask_to_double(mask), cfg.lambda_dice, cfg.dice_eps,
                            cfg.ds_main / wsum, dz_main);
  HeadLoss aux = head_loss(fc.z_aux, avgpool2_mask(mask), cfg.lambda_dice, cfg.dice_eps,
                           cfg.ds_aux / wsum, dz_aux);
  LossBreakdown lb;
  lb.bce_main = main.bce;
  lb.dice_main = main.dice;
  lb.bce_aux = aux.bce;
  lb.dice_aux = aux.dice;
  lb.total = (cfg.ds_main * (main.bce + cfg.lambda_dice * main.dice) +
              cfg.ds_aux * (aux.bce + cfg.lambda_dice * aux.dice)) /
             wsum;
  lb.min_abs_preact = fc.min_abs_preact;
  lb.min_channel_var = fc.min_channel_var;
  return lb;
}

}  // namespace detail

// Loss without gradients (finite-difference probes, validation).
inline LossBreakdown loss_forward(const NetConfig& cfg, const ParamVec& params,
                                  const GrayImage& img, const BinMask& mask) {
  if (mask.w != img.w || mask.h != img.h) throw std::invalid_argument("mask/image shape mismatch");
  ParamLayout L = make_layout(cfg);
  detail::ForwardCache fc;
  detail::forward_pass(cfg, L, params, img, fc);
  return detail::losses_from_cache(cfg, fc, mask, nullptr, nullptr);
}

// Full forward + exact reverse-mode gradient. Accumulates into `grad`
// (callers zero it or chain batch members).
inline LossBreakdown loss_and_grad(const NetConfig& cfg, const ParamVec& params,
                                   const GrayImage& img, const BinMask& mask, ParamVec& grad) {
  if (mask.w != img.w || mask.h != img.h) throw std::invalid_argument("mask/image shape mismatch");
  ParamLayout L = make_layout(cfg);
  if (grad.size() != L.total) throw std::invalid_argument("gradient vector size mismatch");
  detail::ForwardCache fc;
  detail::forward_pass(cfg, L, params, img, fc);

  std::vector<double> dz_main, dz_aux;
  LossBreakdown lb = detail::losses_from_cache(cfg, fc, mask, &dz_main, &dz_aux);

  const int c0 = cfg.channels[0], c1 = cfg.channels[1], c2 = cfg.channels[2];
  const int H = fc.H, W = fc.W, H2 = H / 2, W2 = W / 2, H4 = H / 4, W4 = W / 4;
  const std::size_t nf = static_cast<std::size_t>(H) * W, nh = static_cast<std::size_t>(H2) * W2;

  auto g = [&](const char* name) { return grad.data() + L.at(name).offset; };
  std::vector<double> xpad, sp, sw;

  // Heads.
  const double* ow = params.data() + L.at("out.w").offset;
  std::vector<double> dd0(static_cast<std::size_t>(c0) * nf, 0.0);
  {
    double dob = 0.0;
    for (std::size_t i = 0; i < nf; ++i) dob += dz_main[i];
    g("out.b")[0] += dob;
    double* dow = g("out.w");
    for (int c = 0; c < c0; ++c) {
      const double* ec = fc.dec0.e.data() + static_cast<std::size_t>(c) * nf;
      double* ddc = dd0.data() + static_cast<std::size_t>(c) * nf;
      double acc = 0.0;
      for (std::size_t i = 0; i < nf; ++i) {
        acc += dz_main[i] * ec[i];
        ddc[i] += ow[c] * dz_main[i];
      }
      dow[c] += acc;
    }
  }
  const double* aw = params.data() + L.at("aux.w").offset;
  std::vector<double> dd1(static_cast<std::size_t>(c1) * nh, 0.0);
  {
    double dab = 0.0;
    for (std::size_t i = 0; i < nh; ++i) dab += dz_aux[i];
    g("aux.b")[0] += dab;
    double* daw = g("aux.w");
    for (int c = 0; c < c1; ++c) {
      const double* ec = fc.dec1.e.data() + static_cast<std::size_t>(c) * nh;
      double* ddc = dd1.data() + static_cast<std::size_t>(c) * nh;
      double acc = 0.0;
      for (std::size_t i = 0; i < nh; ++i) {
        acc += dz_aux[i] * ec[i];
        ddc[i] += aw[c] * dz_aux[i];
      }
      daw[c] += acc;
    }
  }

  // dec0 block.
  std::vector<double> dz(static_cast<std::size_t>(c0) * nf);
  {
    detail::BlockParams bp = detail::block_params(L, params, "dec0");
    detail::norm_act_bwd(fc.dec0, bp, cfg, dd0.data(), dz.data(), g("dec0.b"), g("dec0.g"),
                         g("dec0.beta"));
    detail::pad_into(fc.cat0, c1 + c0, H, W, xpad);
    convk::wgrad3x3_s1(dz.data(), c0, xpad.data(), c1 + c0, H, W, g("dec0.w"));
    std::vector<double> dcat0(static_cast<std::size_t>(c1 + c0) * nf);
    detail::dgrad_s1_any(dz.data(), c0, H, W, bp.w, c1 + c0, dcat0.data(), sp, sw);
    // split: first c1 channels flow up into dec1, last c0 are the enc0 skip
    std::vector<double> tmp(static_cast<std::size_t>(c1) * nh);
    detail::sumpool2(dcat0.data(), c1, H, W, tmp.data());
    for (std::size_t i = 0; i < tmp.size(); ++i) dd1[i] += tmp[i];
    dd0.assign(dcat0.begin() + static_cast<std::size_t>(c1) * nf, dcat0.end());
  }

  // dec1 block.
  std::vector<double> de2(static_cast<std::size_t>(c2) * H4 * W4);
  std::vector<double> de1_skip(static_cast<std::size_t>(c1) * nh);
  {
    detail::BlockParams bp = detail::block_params(L, params, "dec1");
    dz.resize(static_cast<std::size_t>(c1) * nh);
    detail::norm_act_bwd(fc.dec1, bp, cfg, dd1.data(), dz.data(), g("dec1.b"), g("dec1.g"),
                         g("dec1.beta"));
    detail::pad_into(fc.cat1, c2 + c1, H2, W2, xpad);
    convk::wgrad3x3_s1(dz.data(), c1, xpad.data(), c2 + c1, H2, W2, g("dec1.w"));
    std::vector<double> dcat1(static_cast<std::size_t>(c2 + c1) * nh);
    detail::dgrad_s1_any(dz.data(), c1, H2, W2, bp.w, c2 + c1, dcat1.data(), sp, sw);
    detail::sumpool2(dcat1.data(), c2, H2, W2, de2.data());
    std::copy(dcat1.begin() + static_cast<std::size_t>(c2) * nh, dcat1.end(), de1_skip.begin());
  }

  // down2 block.
  std::vector<double> de1(static_cast<std::size_t>(c1) * nh);
  {
    detail::BlockParams bp = detail::block_params(L, params, "down2");
    dz.resize(static_cast<std::size_t>(c2) * H4 * W4);
    detail::norm_act_bwd(fc.down2, bp, cfg, de2.data(), dz.data(), g("down2.b"), g("down2.g"),
                         g("down2.beta"));
    detail::pad_into(fc.down1.e, c1, H2, W2, xpad);
    convk::wgrad3x3_s2(dz.data(), c2, xpad.data(), c1, H2, W2, g("down2.w"));
    convk::dgrad3x3_s2(dz.data(), c2, H2, W2, bp.w, c1, de1.data(), sp);
    for (std::size_t i = 0; i < de1.size(); ++i) de1[i] += de1_skip[i];
  }

  // down1 block.
  std::vector<double> de0(static_cast<std::size_t>(c0) * nf);
  {
    detail::BlockParams bp = detail::block_params(L, params, "down1");
    dz.resize(static_cast<std::size_t>(c1) * nh);
    detail::norm_act_bwd(fc.down1, bp, cfg, de1.data(), dz.data(), g("down1.b"), g("down1.g"),
                         g("down1.beta"));
    detail::pad_into(fc.enc0.e, c0, H, W, xpad);
    convk::wgrad3x3_s2(dz.data(), c1, xpad.data(), c0, H, W, g("down1.w"));
    convk::dgrad3x3_s2(dz.data(), c1, H, W, bp.w, c0, de0.data(), sp);
    for (std::size_t i = 0; i < de0.size(); ++i) de0[i] += dd0[i];  // enc0 skip grad
  }

  // enc0 block (no input gradient needed).
  {
    detail::BlockParams bp = detail::block_params(L, params, "enc0");
    dz.resize(static_cast<std::size_t>(c0) * nf);
    detail::norm_act_bwd(fc.enc0, bp, cfg, de0.data(), dz.data(), g("enc0.b"), g("enc0.g"),
                         g("enc0.beta"));
    detail::pad_into(fc.x, 1, H, W, xpad);
    convk::wgrad3x3_s1(dz.data(), c0, xpad.data(), 1, H, W, g("enc0.w"));
  }

  return lb;
}

// ---------------------------------------------------------------------------
// AdamW with linear warmup and a cosine decay floor, decoupled weight decay,
// and a global gradient-norm clip applied before the moment updates.

struct OptState {
  double peak_lr = 1e-3, floor_lr = 1e-5;
  long long warmup_steps = 500, total_steps = 10000;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  long long step = 0;
  std::vector<double> m, v;
};

inline double lr_at(const OptState& o, long long t) {
  if (t < o.warmup_steps)
    return o.peak_lr * static_cast<double>(t) / static_cast<double>(o.warmup_steps);
  if (t >= o.total_steps) return o.floor_lr;
  double x = static_cast<double>(t - o.warmup_steps) /
             static_cast<double>(o.total_steps - o.warmup_steps);
  return o.floor_lr + (o.peak_lr - o.floor_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

inline void adamw_step(ParamVec& params, const ParamVec& grads, OptState& o) {
  if (params.size() != grads.size()) throw std::invalid_argument("param/grad size mismatch");
  if (o.m.empty()) {
    o.m.assign(params.size(), 0.0);
    o.v.assign(params.size(), 0.0);
  }
  if (o.m.size() != params.size()) throw std::invalid_argument("optimizer state size mismatch");
  double nrm2 = 0.0;
  for (double gv : grads) nrm2 += gv * gv;
  double nrm = std::sqrt(nrm2);
  double scale = (o.clip_norm > 0.0 && nrm > o.clip_norm) ? o.clip_norm / nrm : 1.0;
  const double lr = lr_at(o, o.step);
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(o.step + 1));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(o.step + 1));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double gv = grads[i] * scale;
    o.m[i] = o.beta1 * o.m[i] + (1.0 - o.beta1) * gv;
    o.v[i] = o.beta2 * o.v[i] + (1.0 - o.beta2) * gv * gv;
    double mhat = o.m[i] / bc1, vhat = o.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + o.eps) + lr * o.weight_decay * params[i];
  }
  ++o.step;
}

// ---------------------------------------------------------------------------
// Local training loop: seeded reshuffle each epoch, fixed-size minibatches,
// optional proximal pull toward an anchor parameter vector.

struct Sample {
  GrayImage patch;
  BinMask mask;
};

struct TrainStats {
  double mean_loss = 0.0;
  long long steps = 0;
};

inline TrainStats local_train(const NetConfig& cfg, ParamVec& params, OptState& opt,
                              const std::vector<Sample>& data, int epochs, double prox_mu,
                              const ParamVec* anchor, uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("local_train: empty dataset");
  if (epochs < 1) throw std::invalid_argument("local_train: epochs must be >= 1");
  if (prox_mu < 0.0) throw std::invalid_argument("local_train: negative prox_mu");
  if (prox_mu > 0.0 && (!anchor || anchor->size() != params.size()))
    throw std::invalid_argument("local_train: prox_mu > 0 requires a matching anchor");
  ParamLayout L = make_layout(cfg);
  if (params.size() != L.total) throw std::invalid_argument("parameter vector size mismatch");

  ParamVec grad(L.total);
  TrainStats st;
  double loss_sum = 0.0;
  long long sample_count = 0;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int ep = 0; ep < epochs; ++ep) {
    RandStream shuf(derive_seed(seed, "shuffle", {static_cast<uint64_t>(ep)}));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(shuf.uniform_int(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch)) {
      std::size_t bsz = std::min(static_cast<std::size_t>(cfg.batch), order.size() - pos);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = 0; k < bsz; ++k) {
        const Sample& s = data[order[pos + k]];
        LossBreakdown lb = loss_and_grad(cfg, params, s.patch, s.mask, grad);
        loss_sum += lb.total;
        ++sample_count;
      }
      const double inv = 1.0 / static_cast<double>(bsz);
      for (double& gv : grad) gv *= inv;
      if (prox_mu > 0.0)
        for (std::size_t i = 0; i < grad.size(); ++i)
          grad[i] += prox_mu * (params[i] - (*anchor)[i]);
      adamw_step(params, grad, opt);
      ++st.steps;
    }
  }
  st.mean_loss = loss_sum / static_cast<double>(sample_count);
  return st;
}

// ---------------------------------------------------------------------------
// Checkpoints: text header describing the layout, then the raw parameter
// doubles little-endian in layout order.

inline void save_checkpoint(const std::string& path, const NetConfig& cfg, const ParamVec& params) {
  ParamLayout L = make_layout(cfg);
  if (params.size() != L.total) throw std::invalid_argument("parameter vector size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f << "ecgfedckpt 1\n";
  f << "channels " << cfg.channels[0] << ' ' << cfg.channels[1] << ' ' << cfg.channels[2] << '\n';
  f << "patch " << cfg.patch << " batch " << cfg.batch << '\n';
  f << "tensors " << L.tensors.size() << '\n';
  for (const auto& t : L.tensors) {
    f << t.name;
    for (int d : t.shape) f << ' ' << d;
    f << '\n';
  }
  f << "data\n";
  static_assert(sizeof(double) == 8);
  for (double v : params) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    f.write(reinterpret_cast<const char*>(b), 8);
  }
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

inline std::pair<NetConfig, ParamVec> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "ecgfedckpt 1")
    throw std::runtime_error("bad checkpoint magic in " + path);
  NetConfig cfg;
  std::string word;
  f >> word;
  if (word != "channels") throw std::runtime_error("bad checkpoint header (channels)");
  f >> cfg.channels[0] >> cfg.channels[1] >> cfg.channels[2];
  f >> word >> cfg.patch >> word >> cfg.batch;
  std::size_t ntensors = 0;
  f >> word >> ntensors;
  if (word != "tensors") throw std::runtime_error("bad checkpoint header (tensors)");
  std::getline(f, line);  // finish the tensors line
  ParamLayout L = make_layout(cfg);
  if (ntensors != L.tensors.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (const auto& t : L.tensors) {
    if (!std::getline(f, line)) throw std::runtime_error("truncated checkpoint header");
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    if (name != t.name) throw std::runtime_error("checkpoint tensor name mismatch: " + name);
    for (int d : t.shape) {
      int got = -1;
      ls >> got;
      if (got != d) throw std::runtime_error("checkpoint tensor shape mismatch: " + name);
    }
  }
  if (!std::getline(f, line) || line != "data") throw std::runtime_error("bad checkpoint data marker");
  ParamVec p(L.total);
  for (double& v : p) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    if (!f) throw std::runtime_error("truncated checkpoint data in " + path);
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
    std::memcpy(&v, &u, 8);
  }
  return {cfg, std::move(p)};
}

}  // namespace ecgfed
