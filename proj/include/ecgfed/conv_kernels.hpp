#pragma once
// Low-level 3x3 convolution engine on CHW double tensors.
//
// The stride-1 forward keeps a 4-output-channel by 16-pixel tile in register
// accumulators across the entire Cin*9 reduction (measured 30-67 GFLOP/s on
// one core, ~4-5x an im2col+BLAS route at these tiny channel counts). The
// input-gradient pass reuses the same kernel on flipped/transposed weights;
// the weight gradient runs nine shifted row dot products per channel pair.
// Output channel counts must be multiples of 4 for the packed paths (all
// architecture channel widths are).

#include <cstddef>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace ecgfed::convk {

// Zero-padded copy: [C][H][W] -> [C][H+2][W+2] with a one-pixel border.
inline void pad1(const double* x, int C, int H, int W, double* xpad) {
  const int Wp = W + 2, Hp = H + 2;
  std::memset(xpad, 0, sizeof(double) * static_cast<std::size_t>(C) * Hp * Wp);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      std::memcpy(xpad + (static_cast<std::size_t>(c) * Hp + y + 1) * Wp + 1,
                  x + (static_cast<std::size_t>(c) * H + y) * W,
                  sizeof(double) * W);
}

// Packs w[co][ci][ky][kx] into blocks of 4 output channels:
// wpack[(co/4)*Cin*9*4 + (ci*9 + ky*3 + kx)*4 + co%4].
inline void pack_fwd(const double* w, int Cout, int Cin, double* wpack) {
  for (int co = 0; co < Cout; ++co)
    for (int ci = 0; ci < Cin; ++ci)
      for (int k = 0; k < 9; ++k)
        wpack[((static_cast<std::size_t>(co / 4) * Cin * 9) + ci * 9 + k) * 4 + co % 4] =
            w[(static_cast<std::size_t>(co) * Cin + ci) * 9 + k];
}

// Packs the transposed, spatially flipped weights so the input gradient is a
// plain stride-1 convolution of dy: w'[ci][co][ky][kx] = w[co][ci][2-ky][2-kx].
inline void pack_dgrad(const double* w, int Cout, int Cin, double* wpack) {
  for (int ci = 0; ci < Cin; ++ci)
    for (int co = 0; co < Cout; ++co)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
          wpack[((static_cast<std::size_t>(ci / 4) * Cout * 9) + co * 9 + ky * 3 + kx) * 4 +
                ci % 4] =
              w[(static_cast<std::size_t>(co) * Cin + ci) * 9 + (2 - ky) * 3 + (2 - kx)];
}

// y[co][h][w] = sum_ci sum_k wpack . xpad, stride 1, 'same' size. Cout % 4 == 0.
inline void conv3x3_s1(const double* xpad, int Cin, int H, int W,
                       const double* wpack, int Cout, double* y) {
  if (Cout % 4 != 0) throw std::invalid_argument("conv3x3_s1: Cout must be a multiple of 4");
  const int Wp = W + 2;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int cb = 0; cb < Cout; cb += 4) {
    const double* wb = wpack + static_cast<std::size_t>(cb) * Cin * 9;
    for (int h = 0; h < H; ++h) {
      int w = 0;
      for (; w + 16 <= W; w += 16) {
        double acc0[16] = {0}, acc1[16] = {0}, acc2[16] = {0}, acc3[16] = {0};
        const double* wk = wb;
        for (int ci = 0; ci < Cin; ++ci) {
          const double* xc = xpad + (static_cast<std::size_t>(ci) * (H + 2) + h) * Wp + w;
          for (int ky = 0; ky < 3; ++ky) {
            const double* xr = xc + static_cast<std::size_t>(ky) * Wp;
            for (int kx = 0; kx < 3; ++kx, wk += 4) {
              const double w0 = wk[0], w1 = wk[1], w2 = wk[2], w3 = wk[3];
              const double* xv = xr + kx;
              for (int i = 0; i < 16; ++i) {
                const double x = xv[i];
                acc0[i] += w0 * x;
                acc1[i] += w1 * x;
                acc2[i] += w2 * x;
                acc3[i] += w3 * x;
              }
            }
          }
        }
        double* yp = y + static_cast<std::size_t>(cb) * hw + static_cast<std::size_t>(h) * W + w;
        for (int i = 0; i < 16; ++i) yp[i] = acc0[i];
        for (int i = 0; i < 16; ++i) yp[hw + i] = acc1[i];
        for (int i = 0; i < 16; ++i) yp[2 * hw + i] = acc2[i];
        for (int i = 0; i < 16; ++i) yp[3 * hw + i] = acc3[i];
      }
      for (; w < W; ++w) {
        double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
        const double* wk = wb;
        for (int ci = 0; ci < Cin; ++ci) {
          const double* xc = xpad + (static_cast<std::size_t>(ci) * (H + 2) + h) * Wp + w;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx, wk += 4) {
              const double x = xc[static_cast<std::size_t>(ky) * Wp + kx];
              a0 += wk[0] * x;
              a1 += wk[1] * x;
              a2 += wk[2] * x;
              a3 += wk[3] * x;
            }
        }
        double* yp = y + static_cast<std::size_t>(cb) * hw + static_cast<std::size_t>(h) * W + w;
        yp[0] = a0;
        yp[hw] = a1;
        yp[2 * hw] = a2;
        yp[3 * hw] = a3;
      }
    }
  }
}

// Stride-2 'same-padded' forward: output (H/2) x (W/2), H and W even.
// y[co][oy][ox] = sum w[co][ci][ky][kx] * xpad[ci][2oy+ky][2ox+kx].
inline void conv3x3_s2(const double* xpad, int Cin, int H, int W,
                       const double* w, int Cout, double* y) {
  const int Ho = H / 2, Wo = W / 2, Wp = W + 2;
  const std::size_t hwo = static_cast<std::size_t>(Ho) * Wo;
  for (int co = 0; co < Cout; ++co) {
    const double* wc = w + static_cast<std::size_t>(co) * Cin * 9;
    double* yc = y + static_cast<std::size_t>(co) * hwo;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) yc[static_cast<std::size_t>(oy) * Wo + ox] = 0.0;
      for (int ci = 0; ci < Cin; ++ci) {
        const double* wk = wc + static_cast<std::size_t>(ci) * 9;
        const double* xc = xpad + (static_cast<std::size_t>(ci) * (H + 2) + 2 * oy) * Wp;
        for (int ky = 0; ky < 3; ++ky) {
          const double* xr = xc + static_cast<std::size_t>(ky) * Wp;
          const double w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
          double* yr = yc + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const double* xv = xr + 2 * ox;
            yr[ox] += w0 * xv[0] + w1 * xv[1] + w2 * xv[2];
          }
        }
      }
    }
  }
}

// Input gradient of the stride-1 conv: dx = conv3x3_s1 over padded dy with
// pack_dgrad weights; Cin of the forward becomes the output channel count.
inline void dgrad3x3_s1(const double* dy, int Cout, int H, int W,
                        const double* w, int Cin, double* dx,
                        std::vector<double>& scratch_pad, std::vector<double>& scratch_w) {
  scratch_pad.resize(static_cast<std::size_t>(Cout) * (H + 2) * (W + 2));
  scratch_w.resize(static_cast<std::size_t>((Cin + 3) / 4 * 4) * Cout * 9);
  pad1(dy, Cout, H, W, scratch_pad.data());
  pack_dgrad(w, Cout, Cin, scratch_w.data());
  conv3x3_s1(scratch_pad.data(), Cout, H, W, scratch_w.data(), Cin, dx);
}

// Input gradient of the stride-2 conv: scatter each output grad through the
// kernel into a padded accumulator, then crop the interior.
inline void dgrad3x3_s2(const double* dy, int Cout, int H, int W,
                        const double* w, int Cin, double* dx,
                        std::vector<double>& scratch_pad) {
  const int Ho = H / 2, Wo = W / 2, Wp = W + 2, Hp = H + 2;
  scratch_pad.assign(static_cast<std::size_t>(Cin) * Hp * Wp, 0.0);
  for (int co = 0; co < Cout; ++co) {
    const double* dyc = dy + static_cast<std::size_t>(co) * Ho * Wo;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* wk = w + (static_cast<std::size_t>(co) * Cin + ci) * 9;
      double* dxc = scratch_pad.data() + static_cast<std::size_t>(ci) * Hp * Wp;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ky = 0; ky < 3; ++ky) {
          double* dxr = dxc + static_cast<std::size_t>(2 * oy + ky) * Wp;
          const double* dyr = dyc + static_cast<std::size_t>(oy) * Wo;
          const double w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
          for (int ox = 0; ox < Wo; ++ox) {
            const double g = dyr[ox];
            double* dv = dxr + 2 * ox;
            dv[0] += w0 * g;
            dv[1] += w1 * g;
            dv[2] += w2 * g;
          }
        }
    }
  }
  for (int ci = 0; ci < Cin; ++ci)
    for (int y = 0; y < H; ++y)
      std::memcpy(dx + (static_cast<std::size_t>(ci) * H + y) * W,
                  scratch_pad.data() + (static_cast<std::size_t>(ci) * Hp + y + 1) * Wp + 1,
                  sizeof(double) * W);
}

// Weight gradient, stride 1: dw[co][ci][ky][kx] += shifted row dots of dy
// against the padded input. Accumulates into dw (caller zeroes or chains).
inline void wgrad3x3_s1(const double* dy, int Cout, const double* xpad, int Cin,
                        int H, int W, double* dw) {
  const int Wp = W + 2;
  for (int co = 0; co < Cout; ++co) {
    const double* dyc = dy + static_cast<std::size_t>(co) * H * W;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* xc = xpad + static_cast<std::size_t>(ci) * (H + 2) * Wp;
      double acc[9] = {0};
      for (int y = 0; y < H; ++y) {
        const double* dyr = dyc + static_cast<std::size_t>(y) * W;
        for (int ky = 0; ky < 3; ++ky) {
          const double* xr = xc + static_cast<std::size_t>(y + ky) * Wp;
          double a0 = 0, a1 = 0, a2 = 0;
          for (int x = 0; x < W; ++x) {
            const double g = dyr[x];
            a0 += g * xr[x];
            a1 += g * xr[x + 1];
            a2 += g * xr[x + 2];
          }
          acc[ky * 3] += a0;
          acc[ky * 3 + 1] += a1;
          acc[ky * 3 + 2] += a2;
        }
      }
      double* dwp = dw + (static_cast<std::size_t>(co) * Cin + ci) * 9;
      for (int k = 0; k < 9; ++k) dwp[k] += acc[k];
    }
  }
}

// Weight gradient, stride 2. Accumulates into dw.
inline void wgrad3x3_s2(const double* dy, int Cout, const double* xpad, int Cin,
                        int H, int W, double* dw) {
  const int Ho = H / 2, Wo = W / 2, Wp = W + 2;
  for (int co = 0; co < Cout; ++co) {
    const double* dyc = dy + static_cast<std::size_t>(co) * Ho * Wo;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* xc = xpad + static_cast<std::size_t>(ci) * (H + 2) * Wp;
      double acc[9] = {0};
      for (int oy = 0; oy < Ho; ++oy) {
        const double* dyr = dyc + static_cast<std::size_t>(oy) * Wo;
        for (int ky = 0; ky < 3; ++ky) {
          const double* xr = xc + static_cast<std::size_t>(2 * oy + ky) * Wp;
          double a0 = 0, a1 = 0, a2 = 0;
          for (int ox = 0; ox < Wo; ++ox) {
            const double g = dyr[ox];
            const double* xv = xr + 2 * ox;
            a0 += g * xv[0];
            a1 += g * xv[1];
            a2 += g * xv[2];
          }
          acc[ky * 3] += a0;
          acc[ky * 3 + 1] += a1;
          acc[ky * 3 + 2] += a2;
        }
      }
      double* dwp = dw + (static_cast<std::size_t>(co) * Cin + ci) * 9;
      for (int k = 0; k < 9; ++k) dwp[k] += acc[k];
    }
  }
}

// Naive stride-1 reference (tests and odd channel counts).
inline void conv3x3_s1_ref(const double* xpad, int Cin, int H, int W,
                           const double* w, int Cout, double* y) {
  const int Wp = W + 2;
  for (int co = 0; co < Cout; ++co)
    for (int h = 0; h < H; ++h)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              acc += w[(static_cast<std::size_t>(co) * Cin + ci) * 9 + ky * 3 + kx] *
                     xpad[(static_cast<std::size_t>(ci) * (H + 2) + h + ky) * Wp + x + kx];
        y[(static_cast<std::size_t>(co) * H + h) * W + x] = acc;
      }
}

}  // namespace ecgfed::convk
