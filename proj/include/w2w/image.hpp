// 8-bit raster images and binary PPM (P6) / PGM (P5) files.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "w2w/tensor.hpp"

namespace w2w {

struct Image {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<std::uint8_t> pixels;  // row-major H x W x channels

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 3, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_netpbm(const std::filesystem::path& path, const Image& img, const char* magic,
                         const std::string& comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << magic << '\n';
  if (!comment.empty()) out << "# " << comment << '\n';
  out << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline std::string next_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 3) throw FormatError("write_ppm: image must have 3 channels");
  detail::write_netpbm(path, img, "P6", "");
}

// Grayscale heatmap; `comment` lands in a header comment line.
inline void write_pgm(const std::filesystem::path& path, const Image& img, const std::string& comment = "") {
  if (img.channels != 1) throw FormatError("write_pgm: image must have 1 channel");
  detail::write_netpbm(path, img, "P5", comment);
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::string magic = detail::next_token(in);
  if (magic != "P6" && magic != "P5") throw FormatError(path.string() + ": not a binary PPM/PGM file");
  const std::size_t w = std::stoul(detail::next_token(in));
  const std::size_t h = std::stoul(detail::next_token(in));
  const std::size_t maxval = std::stoul(detail::next_token(in));
  if (maxval != 255) throw FormatError(path.string() + ": only 8-bit images are supported");
  Image img(h, w, magic == "P6" ? 3 : 1);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw FormatError(path.string() + ": truncated");
  return img;
}

// Min-max normalized 8-bit heatmap of a rows x cols table.
inline Image heatmap(const std::vector<double>& values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw DimensionError("heatmap: table size mismatch");
  Image img(rows, cols, 1);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = span > 0 ? (values[i] - *lo) / span : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return img;
}

// Pixel v -> v / 255 - 0.5 as an H x W x C tensor.
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  std::vector<T> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.pixels[i]) / T(255) - T(0.5);
  return Tensor<T>({img.height, img.width, img.channels}, std::move(v));
}

}  // namespace w2w
