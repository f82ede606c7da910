#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "minisvrt/contour.hpp"
#include "minisvrt/errors.hpp"

namespace minisvrt {

// Row-major 8-bit grayscale image. 0 is a black stroke, 255 the white
// background.
struct ImageGray {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const ImageGray& other) const = default;
};

inline ImageGray make_blank(int width, int height, std::uint8_t value = 255) {
  ImageGray img;
  img.width = width;
  img.height = height;
  img.pixels.assign(static_cast<std::size_t>(width) * height, value);
  return img;
}

// Draws the outlines of closed polylines onto a white canvas. Binary
// strokes, no anti-aliasing: a pixel goes black iff its center lies within
// stroke_width/2 of some edge. Pixel centers sit at integer coordinates.
inline ImageGray rasterize(std::span<const std::vector<Point2>> polylines, int side,
                           int stroke_width = 1) {
  if (side < 32) throw ArgumentError("rasterize: side must be >= 32");
  if (stroke_width < 1) throw ArgumentError("rasterize: stroke_width must be >= 1");
  for (const auto& poly : polylines)
    for (const auto& p : poly)
      if (!(p.x >= 0.0 && p.x < side && p.y >= 0.0 && p.y < side) || !std::isfinite(p.x) ||
          !std::isfinite(p.y))
        throw ArgumentError("rasterize: coordinate outside canvas");

  ImageGray img = make_blank(side, side);
  double radius = 0.5 * stroke_width;
  double r2 = radius * radius;
  for (const auto& poly : polylines) {
    std::size_t n = poly.size();
    if (n < 2) continue;
    for (std::size_t i = 0; i < n; ++i) {
      Point2 a = poly[i];
      Point2 b = poly[(i + 1) % n];
      int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - radius)));
      int x1 = std::min(side - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + radius)));
      int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - radius)));
      int y1 = std::min(side - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + radius)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (geo::point_segment_dist2({static_cast<double>(x), static_cast<double>(y)}, a, b) <= r2)
            img.at(x, y) = 0;
        }
      }
    }
  }
  return img;
}

// Box-filter downscale by an integer factor. Block averages are
// re-quantized with round-half-up, e.g. a 2x2 block {0,0,255,255} maps
// to 128.
inline ImageGray downscale(const ImageGray& img, int side) {
  if (img.width != img.height) throw ArgumentError("downscale: image must be square");
  if (side <= 0 || side > img.width) throw ArgumentError("downscale: target side must be in [1, source side]");
  if (img.width % side != 0)
    throw ArgumentError("downscale: target side must divide the source side");
  int factor = img.width / side;
  if (factor == 1) return img;
  ImageGray out = make_blank(side, side);
  std::uint64_t block = static_cast<std::uint64_t>(factor) * factor;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      std::uint64_t sum = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) sum += img.at(x * factor + dx, y * factor + dy);
      // round-half-up of sum/block in integer arithmetic
      out.at(x, y) = static_cast<std::uint8_t>((2 * sum + block) / (2 * block));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5, maxval 255)
// ---------------------------------------------------------------------------

inline void write_pgm(const ImageGray& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_pgm: cannot open " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write_pgm: write failed for " + path.string());
}

namespace detail {

inline int pgm_next_token(std::istream& in, std::string& tok) {
  tok.clear();
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = in.get();
  }
  return ch;  // the whitespace (or EOF) that terminated the token
}

}  // namespace detail

inline ImageGray read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_pgm: cannot open " + path.string());
  std::string tok;
  detail::pgm_next_token(in, tok);
  if (tok != "P5") throw FormatError("read_pgm: not a binary PGM: " + path.string());
  auto parse_int = [&](const char* what) {
    detail::pgm_next_token(in, tok);
    try {
      std::size_t used = 0;
      int v = std::stoi(tok, &used);
      if (used != tok.size() || v <= 0) throw std::invalid_argument(what);
      return v;
    } catch (const std::exception&) {
      throw FormatError(std::string("read_pgm: bad ") + what + " in " + path.string());
    }
  };
  int width = parse_int("width");
  int height = parse_int("height");
  int maxval = parse_int("maxval");
  if (maxval != 255) throw FormatError("read_pgm: unsupported maxval in " + path.string());
  ImageGray img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<std::size_t>(width) * height);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw FormatError("read_pgm: truncated payload in " + path.string());
  return img;
}

}  // namespace minisvrt
