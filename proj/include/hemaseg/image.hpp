#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hemaseg/tensor.hpp"

namespace hemaseg {

inline constexpr std::size_t kNumChannels = 16;
inline constexpr std::size_t kNumClasses = 9;
inline constexpr std::uint8_t kUnlabeled = 255;

enum class BloodClass : std::uint8_t {
  background = 0,
  wbc = 1,
  platelet = 2,
  rbc_exterior = 3,
  rbc_interior = 4,
  bead = 5,
  artifact = 6,
  debris = 7,
  bubble = 8,
};

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "background", "wbc", "platelet", "rbc_exterior", "rbc_interior",
    "bead",       "artifact", "debris", "bubble"};

/// C×H×W image with values in [0, 1].
struct MultiChannelImage {
  Tensor<float> pixels;

  MultiChannelImage() = default;
  MultiChannelImage(std::size_t channels, std::size_t height, std::size_t width)
      : pixels(Shape{channels, height, width}) {}
  explicit MultiChannelImage(Tensor<float> t) : pixels(std::move(t)) {
    if (pixels.rank() != 3) throw ShapeError("MultiChannelImage: expected C×H×W, got " + to_string(pixels.shape()));
  }

  [[nodiscard]] std::size_t channels() const { return pixels.dim(0); }
  [[nodiscard]] std::size_t height() const { return pixels.dim(1); }
  [[nodiscard]] std::size_t width() const { return pixels.dim(2); }

  float& at(std::size_t c, std::size_t r, std::size_t col) {
    return pixels[(c * height() + r) * width() + col];
  }
  [[nodiscard]] const float& at(std::size_t c, std::size_t r, std::size_t col) const {
    return pixels[(c * height() + r) * width() + col];
  }

  friend bool operator==(const MultiChannelImage&, const MultiChannelImage&) = default;
};

/// H×W class map. Entries are class codes 0..8, or kUnlabeled for sparse masks.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> codes;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), codes(h * w, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return codes[r * width + c]; }
  [[nodiscard]] std::uint8_t at(std::size_t r, std::size_t c) const { return codes[r * width + c]; }

  [[nodiscard]] std::size_t labeled_count() const {
    std::size_t n = 0;
    for (auto c : codes) n += c != kUnlabeled;
    return n;
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Dense map: every pixel carries a class. Sparse map: most pixels are kUnlabeled.
using DenseLabelMap = LabelMap;
using SparseLabelMask = LabelMap;

}  // namespace hemaseg
