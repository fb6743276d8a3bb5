#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecgfed {

// Row-major grayscale image, values nominally in [0,1] (0 = black ink).
struct GrayImage {
  int w = 0, h = 0;
  std::vector<double> px;

  GrayImage() = default;
  GrayImage(int width, int height, double fill = 0.0)
      : w(width), h(height), px(static_cast<size_t>(width) * height, fill) {
    if (width < 0 || height < 0) throw std::invalid_argument("negative image size");
  }

  double& at(int x, int y) {
    assert(x >= 0 && x < w && y >= 0 && y < h);
    return px[static_cast<size_t>(y) * w + x];
  }
  double at(int x, int y) const {
    assert(x >= 0 && x < w && y >= 0 && y < h);
    return px[static_cast<size_t>(y) * w + x];
  }
  // Edge-replicated access, defined for any coordinate.
  double at_clamped(int x, int y) const {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return px[static_cast<size_t>(y) * w + x];
  }
  size_t size() const { return px.size(); }
  bool same_shape(const GrayImage& o) const { return w == o.w && h == o.h; }
};

// Binary mask, 0/1 entries, same layout as GrayImage.
struct BinMask {
  int w = 0, h = 0;
  std::vector<uint8_t> px;

  BinMask() = default;
  BinMask(int width, int height, uint8_t fill = 0)
      : w(width), h(height), px(static_cast<size_t>(width) * height, fill) {
    if (width < 0 || height < 0) throw std::invalid_argument("negative mask size");
  }

  uint8_t& at(int x, int y) {
    assert(x >= 0 && x < w && y >= 0 && y < h);
    return px[static_cast<size_t>(y) * w + x];
  }
  uint8_t at(int x, int y) const {
    assert(x >= 0 && x < w && y >= 0 && y < h);
    return px[static_cast<size_t>(y) * w + x];
  }
  uint8_t at_or(int x, int y, uint8_t outside) const {
    if (x < 0 || x >= w || y < 0 || y >= h) return outside;
    return px[static_cast<size_t>(y) * w + x];
  }
  size_t size() const { return px.size(); }
  long count() const {
    long c = 0;
    for (uint8_t v : px) c += v;
    return c;
  }
};

inline uint8_t to_u8(double v) {
  double s = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<uint8_t>(s);
}

}  // namespace ecgfed
