#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

#include "afine/errors.hpp"

namespace afine {

// Dense row-major tensor of doubles. Shapes are kept explicit; all numeric
// kernels in the library operate on flat data with fixed loop order so that
// results are bit-reproducible for identical inputs.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(numel(shape), fill) {}

  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::vector<std::size_t> s, std::vector<double> d) {
    if (numel(s) != d.size()) throw DimensionError("tensor data/shape mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Seeded uniform fill in [lo, hi); the draw order is the flat index order.
  void fill_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : data) v = dist(rng);
  }

  void fill_normal(std::mt19937_64& rng, double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : data) v = dist(rng);
  }
};

// FNV-1a over the raw little-endian bytes of the payload. Used to assert
// that frozen parameter groups stay bit-identical across training runs.
inline std::uint64_t fnv1a_bytes(const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t tensor_hash(const Tensor& t) {
  std::uint64_t h = fnv1a_bytes(t.shape.data(), t.shape.size() * sizeof(std::size_t));
  std::uint64_t hd = fnv1a_bytes(t.data.data(), t.data.size() * sizeof(double));
  return h ^ (hd + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2));
}

}  // namespace afine
