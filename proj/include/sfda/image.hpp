#pragma once

#include "sfda/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace sfda {

// Dense CHW image with double pixels in [0,1] (values outside are clamped
// only when quantizing to disk).
struct Image {
  int c = 0, h = 0, w = 0;
  std::vector<double> px;

  Image() = default;
  Image(int c_, int h_, int w_, double fill = 0.0)
      : c(c_), h(h_), w(w_), px(static_cast<std::size_t>(c_) * h_ * w_, fill) {}

  double& at(int ch, int y, int x) {
    return px[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  double at(int ch, int y, int x) const {
    return px[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  std::size_t size() const { return px.size(); }

  bool same_shape(const Image& o) const { return c == o.c && h == o.h && w == o.w; }
};

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline Image hflip(const Image& im) {
  Image out(im.c, im.h, im.w);
  for (int ch = 0; ch < im.c; ++ch)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) out.at(ch, y, x) = im.at(ch, y, im.w - 1 - x);
  return out;
}

// Shift by (dy, dx) with edge replication; used for pad-and-crop and translation.
inline Image shift(const Image& im, int dy, int dx) {
  Image out(im.c, im.h, im.w);
  for (int ch = 0; ch < im.c; ++ch)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        int sy = std::clamp(y - dy, 0, im.h - 1);
        int sx = std::clamp(x - dx, 0, im.w - 1);
        out.at(ch, y, x) = im.at(ch, sy, sx);
      }
  return out;
}

// Bilinear rotation about the image center; out-of-range samples replicate edges.
inline Image rotate(const Image& im, double degrees) {
  if (degrees == 0.0) return im;
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (im.h - 1) / 2.0, cx = (im.w - 1) / 2.0;
  Image out(im.c, im.h, im.w);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      double ry = y - cy, rx = x - cx;
      double sy = cs * ry - sn * rx + cy;
      double sx = sn * ry + cs * rx + cx;
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      double fy = sy - y0, fx = sx - x0;
      int y0c = std::clamp(y0, 0, im.h - 1), y1c = std::clamp(y0 + 1, 0, im.h - 1);
      int x0c = std::clamp(x0, 0, im.w - 1), x1c = std::clamp(x0 + 1, 0, im.w - 1);
      for (int ch = 0; ch < im.c; ++ch) {
        double v00 = im.at(ch, y0c, x0c), v01 = im.at(ch, y0c, x1c);
        double v10 = im.at(ch, y1c, x0c), v11 = im.at(ch, y1c, x1c);
        out.at(ch, y, x) = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
      }
    }
  return out;
}

inline Image box_blur(const Image& im, int radius) {
  if (radius <= 0) return im;
  Image out(im.c, im.h, im.w);
  for (int ch = 0; ch < im.c; ++ch)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        double sum = 0.0;
        int count = 0;
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dx = -radius; dx <= radius; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= im.h || xx < 0 || xx >= im.w) continue;
            sum += im.at(ch, yy, xx);
            ++count;
          }
        out.at(ch, y, x) = sum / count;
      }
  return out;
}

inline Image add_noise(const Image& im, double sigma, Rng& rng) {
  Image out = im;
  if (sigma <= 0.0) return out;
  for (auto& v : out.px) v = clamp01(v + sigma * rng.normal());
  return out;
}

// Rotate RGB values about the gray axis (1,1,1)/sqrt(3) by `degrees`: a pure
// hue shift that preserves luminance. Identity for non-3-channel images.
inline Image hue_rotate(const Image& im, double degrees) {
  if (im.c != 3 || degrees == 0.0) return im;
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double a = cs + (1.0 - cs) / 3.0;
  const double b = (1.0 - cs) / 3.0 - sn / std::sqrt(3.0);
  const double c = (1.0 - cs) / 3.0 + sn / std::sqrt(3.0);
  Image out(im.c, im.h, im.w);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      double r = im.at(0, y, x), g = im.at(1, y, x), bl = im.at(2, y, x);
      out.at(0, y, x) = clamp01(a * r + b * g + c * bl);
      out.at(1, y, x) = clamp01(c * r + a * g + b * bl);
      out.at(2, y, x) = clamp01(b * r + c * g + a * bl);
    }
  return out;
}

inline Image adjust_brightness(const Image& im, double delta) {
  Image out = im;
  for (auto& v : out.px) v = clamp01(v + delta);
  return out;
}

inline Image adjust_contrast(const Image& im, double factor) {
  double mean = 0.0;
  for (double v : im.px) mean += v;
  mean /= static_cast<double>(im.px.size());
  Image out = im;
  for (auto& v : out.px) v = clamp01(mean + factor * (v - mean));
  return out;
}

inline Image posterize(const Image& im, int levels) {
  if (levels < 2) levels = 2;
  Image out = im;
  for (auto& v : out.px) v = std::round(clamp01(v) * (levels - 1)) / (levels - 1);
  return out;
}

inline Image erase_rect(const Image& im, int y0, int x0, int eh, int ew, double value) {
  Image out = im;
  for (int ch = 0; ch < im.c; ++ch)
    for (int y = y0; y < std::min(im.h, y0 + eh); ++y)
      for (int x = x0; x < std::min(im.w, x0 + ew); ++x) out.at(ch, std::max(y, 0), std::max(x, 0)) = value;
  return out;
}

// --- PPM/PGM I/O (binary P6/P5, 8-bit) ---

inline void write_ppm(const Image& im, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  if (im.c != 3 && im.c != 1) throw ValidationError("write_ppm: image must have 1 or 3 channels");
  f << (im.c == 3 ? "P6" : "P5") << "\n" << im.w << " " << im.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(im.w) * im.c);
  for (int y = 0; y < im.h; ++y) {
    for (int x = 0; x < im.w; ++x)
      for (int ch = 0; ch < im.c; ++ch)
        row[static_cast<std::size_t>(x) * im.c + ch] =
            static_cast<unsigned char>(std::lround(clamp01(im.at(ch, y, x)) * 255.0));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError("write_ppm: short write to " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6" && magic != "P5") throw IoError("read_ppm: unsupported format in " + path);
  auto next_token = [&]() {
    std::string tok;
    for (;;) {
      if (!(f >> tok)) throw IoError("read_ppm: truncated header in " + path);
      if (tok[0] == '#') {
        std::string rest;
        std::getline(f, rest);
        continue;
      }
      return tok;
    }
  };
  int w = std::stoi(next_token());
  int h = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("read_ppm: bad header in " + path);
  f.get();  // single whitespace after maxval
  int c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * c);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  Image im(c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        im.at(ch, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c + ch] / 255.0;
  return im;
}

}  // namespace sfda
