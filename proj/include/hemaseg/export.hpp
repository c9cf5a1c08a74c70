#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hemaseg/image.hpp"
#include "hemaseg/io.hpp"

namespace hemaseg {

using Rgb = std::array<std::uint8_t, 3>;

/// Class colors, indexed by class code.
inline constexpr std::array<Rgb, kNumClasses> kPalette = {{
    {0, 0, 0},        // background
    {230, 25, 75},    // wbc
    {255, 225, 25},   // platelet
    {245, 130, 48},   // rbc_exterior
    {145, 30, 180},   // rbc_interior
    {60, 180, 75},    // bead
    {70, 240, 240},   // artifact
    {128, 128, 128},  // debris
    {0, 130, 200},    // bubble
}};
inline constexpr Rgb kUnlabeledColor = {255, 255, 255};

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bytes;  // row-major RGB triples

  [[nodiscard]] Rgb at(std::size_t r, std::size_t c) const {
    const std::size_t i = 3 * (r * width + c);
    return {bytes[i], bytes[i + 1], bytes[i + 2]};
  }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline RgbImage render_labels(const LabelMap& m) {
  RgbImage img{m.height, m.width, std::vector<std::uint8_t>(3 * m.codes.size())};
  for (std::size_t i = 0; i < m.codes.size(); ++i) {
    const auto c = m.codes[i];
    if (c >= kNumClasses && c != kUnlabeled) throw FormatError("render_labels: unknown class code " + std::to_string(c));
    const Rgb& rgb = c == kUnlabeled ? kUnlabeledColor : kPalette[c];
    std::copy(rgb.begin(), rgb.end(), img.bytes.begin() + std::ptrdiff_t(3 * i));
  }
  return img;
}

/// Inverse of render_labels; colors outside the palette are rejected.
inline LabelMap palette_inverse(const RgbImage& img) {
  LabelMap m(img.height, img.width);
  for (std::size_t i = 0; i < m.codes.size(); ++i) {
    const Rgb px = {img.bytes[3 * i], img.bytes[3 * i + 1], img.bytes[3 * i + 2]};
    if (px == kUnlabeledColor) {
      m.codes[i] = kUnlabeled;
      continue;
    }
    const auto it = std::find(kPalette.begin(), kPalette.end(), px);
    if (it == kPalette.end()) throw FormatError("palette_inverse: color not in palette");
    m.codes[i] = static_cast<std::uint8_t>(it - kPalette.begin());
  }
  return m;
}

/// Three channels of `img` as RGB, jointly min-max scaled to 0..255.
inline RgbImage render_channels(const MultiChannelImage& img, const std::array<std::size_t, 3>& channels) {
  for (auto c : channels) {
    if (c >= img.channels()) throw std::invalid_argument("render_channels: channel " + std::to_string(c) + " out of range");
  }
  const std::size_t H = img.height(), W = img.width();
  float lo = img.at(channels[0], 0, 0), hi = lo;
  for (auto c : channels) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t x = 0; x < W; ++x) {
        lo = std::min(lo, img.at(c, r, x));
        hi = std::max(hi, img.at(c, r, x));
      }
    }
  }
  const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
  RgbImage out{H, W, std::vector<std::uint8_t>(3 * H * W)};
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t k = 0; k < 3; ++k) {
        const float v = (img.at(channels[k], r, x) - lo) * scale;
        out.bytes[3 * (r * W + x) + k] = static_cast<std::uint8_t>(std::clamp(v + 0.5f, 0.0f, 255.0f));
      }
    }
  }
  return out;
}

inline void write_ppm(std::ostream& os, const RgbImage& img) {
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.bytes.data()), std::streamsize(img.bytes.size()));
}

inline RgbImage read_ppm(std::istream& is) {
  std::string magic;
  int maxval = 0;
  RgbImage img;
  if (!(is >> magic >> img.width >> img.height >> maxval) || magic != "P6" || maxval != 255) {
    throw FormatError("ppm: expected binary P6 with maxval 255");
  }
  is.get();
  img.bytes.resize(3 * img.width * img.height);
  if (!is.read(reinterpret_cast<char*>(img.bytes.data()), std::streamsize(img.bytes.size()))) {
    throw FormatError("ppm: truncated payload");
  }
  return img;
}

inline void save_ppm(const std::filesystem::path& path, const RgbImage& img) {
  auto os = io::open_out(path);
  write_ppm(os, img);
}

inline RgbImage load_ppm(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_ppm(is);
}

}  // namespace hemaseg
