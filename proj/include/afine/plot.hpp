#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "afine/errors.hpp"

namespace afine {

// Minimal RGB canvas with a PNG writer (stored deflate blocks, no external
// compression library) and a PPM fallback. Enough for the accuracy bar
// charts the evaluation harness emits.
class Canvas {
 public:
  Canvas(int w, int h, std::uint8_t r = 255, std::uint8_t g = 255, std::uint8_t b = 255)
      : w_(w), h_(h), px_(std::size_t(3) * w * h) {
    for (std::size_t i = 0; i < px_.size(); i += 3) {
      px_[i] = r;
      px_[i + 1] = g;
      px_[i + 2] = b;
    }
  }

  int width() const { return w_; }
  int height() const { return h_; }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    std::size_t i = 3 * (std::size_t(y) * w_ + x);
    px_[i] = r;
    px_[i + 1] = g;
    px_[i + 2] = b;
  }

  void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, r, g, b);
  }

  void hline(int x0, int x1, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (int x = x0; x <= x1; ++x) set(x, y, r, g, b);
  }

  // 3x5 digit glyphs plus '.' and '%', scaled 2x; enough to annotate bars.
  void draw_number(int x, int y, const std::string& text, std::uint8_t r, std::uint8_t g,
                   std::uint8_t b) {
    static const std::uint16_t glyphs[12] = {
        0b111101101101111,  // 0
        0b010110010010111,  // 1
        0b111001111100111,  // 2
        0b111001111001111,  // 3
        0b101101111001001,  // 4
        0b111100111001111,  // 5
        0b111100111101111,  // 6
        0b111001001001001,  // 7
        0b111101111101111,  // 8
        0b111101111001111,  // 9
        0b000000000000010,  // .
        0b101001010100101,  // %
    };
    for (char c : text) {
      int gi = -1;
      if (c >= '0' && c <= '9') gi = c - '0';
      else if (c == '.') gi = 10;
      else if (c == '%') gi = 11;
      if (gi >= 0) {
        std::uint16_t bits = glyphs[gi];
        for (int row = 0; row < 5; ++row)
          for (int col = 0; col < 3; ++col)
            if (bits >> (14 - (row * 3 + col)) & 1)
              fill_rect(x + 2 * col, y + 2 * row, x + 2 * col + 2, y + 2 * row + 2, r, g, b);
      }
      x += 8;
    }
  }

  void save(const std::string& path) const {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".ppm")
      save_ppm(path);
    else
      save_png(path);
  }

  void save_ppm(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write plot: " + path);
    f << "P6\n" << w_ << " " << h_ << "\n255\n";
    f.write(reinterpret_cast<const char*>(px_.data()), std::streamsize(px_.size()));
  }

  void save_png(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write plot: " + path);
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    f.write(reinterpret_cast<const char*>(sig), 8);

    auto write_chunk = [&f](const char type[4], const std::vector<std::uint8_t>& data) {
      auto be32 = [](std::uint32_t v) {
        return std::array<std::uint8_t, 4>{std::uint8_t(v >> 24), std::uint8_t(v >> 16),
                                           std::uint8_t(v >> 8), std::uint8_t(v)};
      };
      auto len = be32(std::uint32_t(data.size()));
      f.write(reinterpret_cast<const char*>(len.data()), 4);
      f.write(type, 4);
      f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
      std::uint32_t crc = crc32_init();
      crc = crc32_update(crc, reinterpret_cast<const std::uint8_t*>(type), 4);
      crc = crc32_update(crc, data.data(), data.size());
      auto crc_be = be32(crc ^ 0xffffffffu);
      f.write(reinterpret_cast<const char*>(crc_be.data()), 4);
    };

    std::vector<std::uint8_t> ihdr;
    auto push32 = [](std::vector<std::uint8_t>& v, std::uint32_t x) {
      v.push_back(std::uint8_t(x >> 24));
      v.push_back(std::uint8_t(x >> 16));
      v.push_back(std::uint8_t(x >> 8));
      v.push_back(std::uint8_t(x));
    };
    push32(ihdr, std::uint32_t(w_));
    push32(ihdr, std::uint32_t(h_));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // RGB
    ihdr.push_back(0);   // deflate
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    write_chunk("IHDR", ihdr);

    // Raw scanlines, each with a leading filter byte of zero.
    std::vector<std::uint8_t> raw;
    raw.reserve(std::size_t(h_) * (std::size_t(w_) * 3 + 1));
    for (int y = 0; y < h_; ++y) {
      raw.push_back(0);
      const std::uint8_t* row = px_.data() + 3 * std::size_t(y) * w_;
      raw.insert(raw.end(), row, row + 3 * std::size_t(w_));
    }

    // zlib stream with stored (uncompressed) deflate blocks.
    std::vector<std::uint8_t> idat{0x78, 0x01};
    std::size_t off = 0;
    while (off < raw.size()) {
      std::size_t n = std::min<std::size_t>(65535, raw.size() - off);
      bool final = off + n == raw.size();
      idat.push_back(final ? 1 : 0);
      idat.push_back(std::uint8_t(n & 0xff));
      idat.push_back(std::uint8_t(n >> 8));
      idat.push_back(std::uint8_t(~n & 0xff));
      idat.push_back(std::uint8_t((~n >> 8) & 0xff));
      idat.insert(idat.end(), raw.begin() + off, raw.begin() + off + n);
      off += n;
    }
    std::uint32_t a = 1, bsum = 0;
    for (std::uint8_t v : raw) {
      a = (a + v) % 65521;
      bsum = (bsum + a) % 65521;
    }
    push32(idat, (bsum << 16) | a);
    write_chunk("IDAT", idat);
    write_chunk("IEND", {});
    if (!f) throw DataError("failed writing plot: " + path);
  }

 private:
  static std::uint32_t crc32_init() { return 0xffffffffu; }

  static std::uint32_t crc32_update(std::uint32_t crc, const std::uint8_t* p, std::size_t n) {
    static const auto table = [] {
      std::array<std::uint32_t, 256> t{};
      for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        t[i] = c;
      }
      return t;
    }();
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
    return crc;
  }

  int w_, h_;
  std::vector<std::uint8_t> px_;
};

}  // namespace afine
