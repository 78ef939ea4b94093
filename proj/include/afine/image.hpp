#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "afine/errors.hpp"
#include "afine/tensor.hpp"

namespace afine {

// RGB raster with values in [0,1], stored channel-major [3, H, W] to match
// the feature-map layout used by the backbones.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size 3*H*W

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), data(std::size_t(3) * h * w, fill) {}

  double at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
  double& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }

  Tensor tensor() const {
    return Tensor::from({3, std::size_t(height), std::size_t(width)}, data);
  }

  void clamp01() {
    for (double& v : data) v = std::clamp(v, 0.0, 1.0);
  }
};

// ---- PPM (binary P6, 8- or 16-bit) ----

inline Image load_image_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image: " + path);
  auto next_token = [&f, &path]() {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
      if (c == '#') {
        while ((c = f.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (!std::isspace(c)) {
        tok.push_back(char(c));
        while ((c = f.peek()) != EOF && !std::isspace(c)) tok.push_back(char(f.get()));
        return tok;
      }
    }
    throw DataError("truncated PPM header: " + path);
  };
  if (next_token() != "P6") throw DataError("unsupported image format (want binary PPM P6): " + path);
  int w = std::stoi(next_token());
  int h = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
    throw DataError("bad PPM header: " + path);
  f.get();  // single whitespace after maxval
  Image img(h, w);
  std::size_t n = std::size_t(3) * h * w;
  if (maxval < 256) {
    std::vector<unsigned char> raw(n);
    f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(n));
    if (!f) throw DataError("truncated PPM payload: " + path);
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = raw[i++] / double(maxval);
  } else {
    std::vector<unsigned char> raw(n * 2);
    f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(n * 2));
    if (!f) throw DataError("truncated PPM payload: " + path);
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          int v = (raw[i] << 8) | raw[i + 1];  // big-endian per the format
          i += 2;
          img.at(c, y, x) = v / double(maxval);
        }
  }
  return img;
}

inline void save_image_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write image: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n65535\n";
  std::vector<unsigned char> raw;
  raw.reserve(std::size_t(6) * img.height * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        int v = int(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 65535.0));
        raw.push_back(static_cast<unsigned char>(v >> 8));
        raw.push_back(static_cast<unsigned char>(v & 0xff));
      }
  f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  if (!f) throw DataError("failed writing image: " + path);
}

inline Image load_image(const std::string& path) { return load_image_ppm(path); }

// ---- synthetic content ----

// Smooth pseudo-natural field: a seeded mixture of oriented sinusoids plus a
// global gradient, squashed into [0.05, 0.95]. Deterministic per seed.
inline Image synthetic_content(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.5, 6.0);
  std::uniform_real_distribution<double> phase(0.0, 6.283185307179586);
  std::uniform_real_distribution<double> amp(0.3, 1.0);
  struct Wave {
    double fx, fy, ph, a;
  };
  std::vector<std::array<Wave, 4>> waves(3);
  for (auto& ch : waves)
    for (auto& wv : ch) wv = {freq(rng), freq(rng), phase(rng), amp(rng)};
  std::uniform_real_distribution<double> grad(-0.5, 0.5);
  double gx = grad(rng), gy = grad(rng);
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u = double(x) / w, v = double(y) / h;
        double s = gx * u + gy * v;
        for (const auto& wv : waves[c])
          s += wv.a * std::sin(6.283185307179586 * (wv.fx * u + wv.fy * v) + wv.ph);
        img.at(c, y, x) = 0.5 + 0.45 * std::tanh(0.6 * s);
      }
  return img;
}

inline Image uniform_noise_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Image img(h, w);
  for (double& v : img.data) v = dist(rng);
  return img;
}

inline Image constant_image(int h, int w, double v) { return Image(h, w, v); }

inline Image checkerboard_image(int h, int w, int cell) {
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.at(c, y, x) = ((y / cell + x / cell) % 2 == 0) ? 1.0 : 0.0;
  return img;
}

// Separable Gaussian blur with reflective borders; sigma <= 0 is identity.
inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double z = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    z += k[i + radius];
  }
  for (double& v : k) v /= z;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return std::clamp(i, 0, n - 1);
  };
  Image tmp(img.height, img.width), out(img.height, img.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[i + radius] * img.at(c, y, reflect(x + i, img.width));
        tmp.at(c, y, x) = s;
      }
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp.at(c, reflect(y + i, img.height), x);
        out.at(c, y, x) = s;
      }
  }
  return out;
}

inline Image add_gaussian_noise(const Image& img, double sigma, std::uint64_t seed) {
  if (sigma <= 0.0) return img;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  Image out = img;
  for (double& v : out.data) v = std::clamp(v + dist(rng), 0.0, 1.0);
  return out;
}

// Monotone degradation ladder used by the synthetic training corpus: level 0
// is the mildest, higher levels blur more and add more noise.
inline Image degrade(const Image& img, int level, std::uint64_t seed) {
  static const double blur[] = {0.0, 0.9, 1.8, 3.0};
  static const double noise[] = {0.0, 0.03, 0.07, 0.13};
  int l = std::clamp(level, 0, 3);
  return add_gaussian_noise(gaussian_blur(img, blur[l]), noise[l], seed);
}

}  // namespace afine
