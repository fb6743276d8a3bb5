#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace ecgfed {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-to-temp + rename so a killed process never leaves a torn file where
// a reader (or a resumed run) could mistake it for a committed artifact.
inline void atomic_write_file(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---- PGM (P5, maxval 255) ----

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  out.reserve(out.size() + img.size());
  for (double v : img.px) out.push_back(static_cast<char>(to_u8(v)));
  return out;
}

inline std::string encode_pgm(const BinMask& m) {
  std::string out = "P5\n" + std::to_string(m.w) + " " + std::to_string(m.h) + "\n255\n";
  out.reserve(out.size() + m.size());
  for (uint8_t v : m.px) out.push_back(static_cast<char>(v ? 255 : 0));
  return out;
}

inline void write_pgm(const fs::path& path, const GrayImage& img) {
  atomic_write_file(path, encode_pgm(img));
}

inline void write_pgm(const fs::path& path, const BinMask& m) {
  atomic_write_file(path, encode_pgm(m));
}

namespace detail {
inline int pgm_next_int(const std::string& s, size_t& pos) {
  // Skip whitespace and '#' comment lines, then parse a decimal integer.
  while (pos < s.size()) {
    char c = s[pos];
    if (c == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= s.size() || s[pos] < '0' || s[pos] > '9')
    throw std::runtime_error("malformed PGM header");
  int v = 0;
  while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
    v = v * 10 + (s[pos] - '0');
    ++pos;
  }
  return v;
}
}  // namespace detail

inline GrayImage read_pgm(const fs::path& path) {
  std::string s = read_file(path);
  if (s.size() < 2 || s[0] != 'P' || s[1] != '5')
    throw std::runtime_error("not a P5 PGM: " + path.string());
  size_t pos = 2;
  int w = detail::pgm_next_int(s, pos);
  int h = detail::pgm_next_int(s, pos);
  int maxval = detail::pgm_next_int(s, pos);
  if (maxval != 255) throw std::runtime_error("unsupported PGM maxval");
  ++pos;  // single whitespace byte after maxval
  if (s.size() - pos < static_cast<size_t>(w) * h)
    throw std::runtime_error("truncated PGM: " + path.string());
  GrayImage img(w, h);
  for (size_t i = 0; i < img.size(); ++i)
    img.px[i] = static_cast<unsigned char>(s[pos + i]) / 255.0;
  return img;
}

inline BinMask read_pgm_mask(const fs::path& path) {
  GrayImage img = read_pgm(path);
  BinMask m(img.w, img.h);
  for (size_t i = 0; i < img.size(); ++i) m.px[i] = img.px[i] >= 0.5 ? 1 : 0;
  return m;
}

// ---- small CSV helpers ----

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::string s = read_file(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::istringstream in(s);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(split_csv_line(line));
  }
  return rows;
}

// Fixed-format double printing for persisted artifacts: shortest round-trip
// representation so re-parsing yields the identical bit pattern.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    for (int prec = 1; prec <= 16; ++prec) {
      char b2[40];
      std::snprintf(b2, sizeof b2, "%.*g", prec, v);
      double r2 = 0.0;
      std::sscanf(b2, "%lf", &r2);
      if (r2 == v) return b2;
    }
  }
  return buf;
}

}  // namespace ecgfed
