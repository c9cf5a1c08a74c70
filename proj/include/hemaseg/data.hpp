#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hemaseg/image.hpp"
#include "hemaseg/rng.hpp"

namespace hemaseg {

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Count range per scene and a size range (radius in px, or pixel area for platelets).
struct ObjectSpec {
  std::size_t min_count = 0;
  std::size_t max_count = 0;
  double min_size = 1;
  double max_size = 1;
};

using GainTable = std::array<std::array<float, kNumChannels>, kNumClasses>;

/// Per-class, per-channel response. Classes are well separated in 16-d.
inline GainTable default_gains() {
  GainTable g{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t k = 0; k < kNumChannels; ++k) {
      const double v = 0.5 + 0.32 * std::sin(2.3 * double(c) + 0.61 * double(k) + 0.29 * double(c * k) + 0.4);
      g[c][k] = static_cast<float>(std::clamp(v, 0.05, 0.95));
    }
  }
  return g;
}

struct SceneSpec {
  std::size_t image_size = 64;
  ObjectSpec wbc{1, 2, 5, 8};
  ObjectSpec platelet{2, 6, 3, 8};
  ObjectSpec rbc{2, 6, 4, 7};
  ObjectSpec bead{1, 2, 2, 3};
  ObjectSpec artifact{1, 2, 8, 16};
  ObjectSpec debris{0, 3, 2, 4};
  ObjectSpec bubble{0, 1, 8, 12};
  GainTable gain = default_gains();
  float noise_sigma = 0.03f;
  float object_jitter = 0.05f;  // relative per-object brightness variation

  /// Default densities scaled to an image side (counts scale with area).
  static SceneSpec for_size(std::size_t side) {
    SceneSpec s;
    s.image_size = side;
    const double area = double(side * side) / (64.0 * 64.0);
    for (ObjectSpec* o : {&s.wbc, &s.platelet, &s.rbc, &s.bead, &s.artifact, &s.debris, &s.bubble}) {
      o->min_count = static_cast<std::size_t>(std::floor(double(o->min_count) * area));
      o->max_count = static_cast<std::size_t>(std::floor(double(o->max_count) * area));
    }
    return s;
  }

  /// Zero objects of every kind.
  static SceneSpec empty(std::size_t side) {
    SceneSpec s = for_size(side);
    for (ObjectSpec* o : {&s.wbc, &s.platelet, &s.rbc, &s.bead, &s.artifact, &s.debris, &s.bubble}) {
      o->min_count = o->max_count = 0;
    }
    return s;
  }

  void validate() const {
    if (image_size == 0) throw ConfigError("scene.image_size: must be positive");
    double footprint = 0;
    for (const ObjectSpec* o : {&wbc, &platelet, &rbc, &bead, &artifact, &debris, &bubble}) {
      if (o->min_size <= 0 || o->max_size < o->min_size) throw ConfigError("scene: size ranges must be positive and ordered");
      if (o->max_count < o->min_count) throw ConfigError("scene: max_count below min_count");
    }
    if (platelet.min_size < 1) throw ConfigError("scene.platelet: minimum size is 1 px");
    auto disc = [](double r) { return (2 * r + 1) * (2 * r + 1); };
    footprint += double(wbc.max_count) * disc(wbc.max_size) + double(platelet.max_count) * platelet.max_size +
                 double(rbc.max_count) * disc(rbc.max_size) + double(bead.max_count) * disc(bead.max_size) +
                 double(artifact.max_count) * 3 * artifact.max_size + double(debris.max_count) * disc(debris.max_size) +
                 double(bubble.max_count) * disc(bubble.max_size);
    if (footprint > double(image_size * image_size)) {
      throw ConfigError("scene: object counts exceed image capacity (" + std::to_string(static_cast<long>(footprint)) +
                        " px footprint for " + std::to_string(image_size * image_size) + " px)");
    }
    if (noise_sigma < 0) throw ConfigError("scene.noise_sigma: must be non-negative");
  }
};

/// Frames as delivered by the instrument: 12 illumination angles, RGB, UV.
struct ChannelFrames {
  std::vector<MultiChannelImage> angles;  // 12 single-channel frames
  MultiChannelImage rgb;                  // 3 channels
  std::optional<MultiChannelImage> uv;    // 1 channel
};

/// Stacks frames into channel order [angle 0..11, R, G, B, UV].
inline MultiChannelImage assemble_16ch(const ChannelFrames& frames) {
  if (frames.angles.size() != 12) {
    throw std::invalid_argument("assemble_16ch: expected 12 angle frames, got " + std::to_string(frames.angles.size()));
  }
  if (!frames.uv) throw std::invalid_argument("assemble_16ch: missing UV frame");
  if (frames.rgb.pixels.rank() != 3 || frames.rgb.channels() != 3) throw std::invalid_argument("assemble_16ch: RGB frame must have 3 channels");
  const std::size_t H = frames.rgb.height(), W = frames.rgb.width();
  auto check = [&](const MultiChannelImage& f, std::size_t ch, const char* what) {
    if (f.pixels.rank() != 3 || f.channels() != ch) throw std::invalid_argument(std::string("assemble_16ch: bad channel count in ") + what);
    if (f.height() != H || f.width() != W) {
      throw ShapeError(std::string("assemble_16ch: ") + what + " frame " + to_string(f.pixels.shape()) +
                       " does not match " + to_string(Shape{H, W}));
    }
  };
  for (const auto& a : frames.angles) check(a, 1, "angle");
  check(*frames.uv, 1, "uv");
  MultiChannelImage out(kNumChannels, H, W);
  const std::size_t plane = H * W;
  for (std::size_t i = 0; i < 12; ++i) std::copy_n(frames.angles[i].pixels.ptr(), plane, out.pixels.ptr() + i * plane);
  std::copy_n(frames.rgb.pixels.ptr(), 3 * plane, out.pixels.ptr() + 12 * plane);
  std::copy_n(frames.uv->pixels.ptr(), plane, out.pixels.ptr() + 15 * plane);
  return out;
}

namespace detail {

inline std::size_t draw_count(const ObjectSpec& o, CounterRng& rng) {
  return o.min_count + static_cast<std::size_t>(rng.below(o.max_count - o.min_count + 1));
}

inline double draw_size(const ObjectSpec& o, CounterRng& rng) {
  return o.min_size + (o.max_size - o.min_size) * rng.uniform();
}

/// Paints a disc (or ellipse) of `code`; returns nothing, writes in-bounds pixels only.
template <typename F>
void for_disc(std::size_t side, double cy, double cx, double ry, double rx, F&& f) {
  const auto lo_y = static_cast<long>(std::floor(cy - ry)), hi_y = static_cast<long>(std::ceil(cy + ry));
  const auto lo_x = static_cast<long>(std::floor(cx - rx)), hi_x = static_cast<long>(std::ceil(cx + rx));
  for (long y = std::max(0L, lo_y); y <= std::min<long>(long(side) - 1, hi_y); ++y) {
    for (long x = std::max(0L, lo_x); x <= std::min<long>(long(side) - 1, hi_x); ++x) {
      const double dy = (double(y) - cy) / ry, dx = (double(x) - cx) / rx;
      const double d = std::sqrt(dy * dy + dx * dx);
      if (d <= 1.0) f(std::size_t(y), std::size_t(x), d);
    }
  }
}

}  // namespace detail

/// Renders a random scene. Every placed object writes its class code; RBCs
/// write exterior on the rim and interior inside. Image values lie in [0, 1].
inline std::pair<MultiChannelImage, DenseLabelMap> generate_scene(const SceneSpec& spec, CounterRng rng) {
  spec.validate();
  const std::size_t S = spec.image_size;
  DenseLabelMap labels(S, S, static_cast<std::uint8_t>(BloodClass::background));
  std::vector<float> brightness(S * S, 1.0f);
  auto pos = [&] { return std::pair{rng.uniform() * double(S), rng.uniform() * double(S)}; };
  auto jitter = [&] { return 1.0f + spec.object_jitter * float(2.0 * rng.uniform() - 1.0); };
  auto paint = [&](std::size_t y, std::size_t x, BloodClass c, float b) {
    labels.at(y, x) = static_cast<std::uint8_t>(c);
    brightness[y * S + x] = b;
  };

  for (std::size_t i = 0, n = detail::draw_count(spec.bubble, rng); i < n; ++i) {
    const auto [cy, cx] = pos();
    const double r = detail::draw_size(spec.bubble, rng);
    const float b = jitter();
    detail::for_disc(S, cy, cx, r, r, [&](std::size_t y, std::size_t x, double) { paint(y, x, BloodClass::bubble, b); });
  }
  for (std::size_t i = 0, n = detail::draw_count(spec.artifact, rng); i < n; ++i) {
    const auto [cy, cx] = pos();
    const double len = detail::draw_size(spec.artifact, rng);
    const double th = rng.uniform() * std::numbers::pi;
    const float b = jitter();
    for (double t = -len / 2; t <= len / 2; t += 0.5) {
      const double y = cy + t * std::sin(th), x = cx + t * std::cos(th);
      detail::for_disc(S, y, x, 1.2, 1.2, [&](std::size_t yy, std::size_t xx, double) { paint(yy, xx, BloodClass::artifact, b); });
    }
  }
  for (std::size_t i = 0, n = detail::draw_count(spec.debris, rng); i < n; ++i) {
    const auto [cy, cx] = pos();
    const double r = detail::draw_size(spec.debris, rng);
    const float b = jitter();
    const std::size_t lobes = 2 + rng.below(2);
    for (std::size_t l = 0; l < lobes; ++l) {
      const double oy = cy + (rng.uniform() - 0.5) * r, ox = cx + (rng.uniform() - 0.5) * r;
      const double lr = r * (0.5 + 0.5 * rng.uniform());
      detail::for_disc(S, oy, ox, lr, lr, [&](std::size_t y, std::size_t x, double) { paint(y, x, BloodClass::debris, b); });
    }
  }
  for (std::size_t i = 0, n = detail::draw_count(spec.bead, rng); i < n; ++i) {
    const auto [cy, cx] = pos();
    const double r = detail::draw_size(spec.bead, rng);
    detail::for_disc(S, cy, cx, r, r, [&](std::size_t y, std::size_t x, double) { paint(y, x, BloodClass::bead, 1.0f); });
  }
  for (std::size_t i = 0, n = detail::draw_count(spec.rbc, rng); i < n; ++i) {
    const auto [cy, cx] = pos();
    const double r = detail::draw_size(spec.rbc, rng);
    const double rim = 1.0 + rng.uniform();
    const float b = jitter();
    detail::for_disc(S, cy, cx, r, r, [&](std::size_t y, std::size_t x, double d) {
      paint(y, x, d * r > r - rim ? BloodClass::rbc_exterior : BloodClass::rbc_interior, b);
    });
  }
  for (std::size_t i = 0, n = detail::draw_count(spec.wbc, rng); i < n; ++i) {
    const auto [cy, cx] = pos();
    const double r = detail::draw_size(spec.wbc, rng);
    const double aspect = 0.8 + 0.4 * rng.uniform();
    const float b = jitter();
    detail::for_disc(S, cy, cx, r * aspect, r / aspect, [&](std::size_t y, std::size_t x, double) { paint(y, x, BloodClass::wbc, b); });
  }
  for (std::size_t i = 0, n = detail::draw_count(spec.platelet, rng); i < n; ++i) {
    std::size_t y = rng.below(S), x = rng.below(S);
    const auto area = static_cast<std::size_t>(std::lround(detail::draw_size(spec.platelet, rng)));
    paint(y, x, BloodClass::platelet, 1.0f);
    for (std::size_t k = 1; k < area; ++k) {
      static constexpr int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
      const auto dir = rng.below(4);
      const long ny = long(y) + dy[dir], nx = long(x) + dx[dir];
      if (ny < 0 || nx < 0 || ny >= long(S) || nx >= long(S)) continue;
      y = std::size_t(ny);
      x = std::size_t(nx);
      paint(y, x, BloodClass::platelet, 1.0f);
    }
  }

  // Render per instrument frame, then assemble in channel order.
  auto render = [&](std::size_t first_channel, std::size_t count) {
    MultiChannelImage f(count, S, S);
    for (std::size_t c = 0; c < count; ++c) {
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          const auto cls = labels.at(y, x);
          const double v = spec.gain[cls][first_channel + c] * brightness[y * S + x] + spec.noise_sigma * rng.normal();
          f.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    return f;
  };
  ChannelFrames frames;
  for (std::size_t a = 0; a < 12; ++a) frames.angles.push_back(render(a, 1));
  frames.rgb = render(12, 3);
  frames.uv = render(15, 1);
  return {assemble_16ch(frames), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Labels, tiling, augmentation

/// Keeps exactly floor(fraction·H·W) uniformly chosen pixels; the rest become unlabeled.
inline SparseLabelMask sparsify_labels(const DenseLabelMap& dense, double fraction, CounterRng rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("sparsify_labels: fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  const std::size_t n = dense.codes.size();
  const auto keep = static_cast<std::size_t>(std::floor(fraction * double(n) + 1e-9));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  SparseLabelMask out(dense.height, dense.width, kUnlabeled);
  for (std::size_t i = 0; i < keep; ++i) out.codes[idx[i]] = dense.codes[idx[i]];
  return out;
}

/// Non-overlapping tile×tile crops in row-major order.
inline std::vector<MultiChannelImage> tile_collate(const MultiChannelImage& image, std::size_t tile = 64) {
  if (tile == 0 || image.height() % tile != 0 || image.width() % tile != 0) {
    throw ShapeError("tile_collate: image " + to_string(image.pixels.shape()) + " not divisible into " +
                     std::to_string(tile) + "-pixel tiles");
  }
  const std::size_t C = image.channels(), rows = image.height() / tile, cols = image.width() / tile;
  std::vector<MultiChannelImage> tiles;
  tiles.reserve(rows * cols);
  for (std::size_t ty = 0; ty < rows; ++ty) {
    for (std::size_t tx = 0; tx < cols; ++tx) {
      MultiChannelImage t(C, tile, tile);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < tile; ++y) {
          std::copy_n(&image.pixels[(c * image.height() + ty * tile + y) * image.width() + tx * tile], tile, &t.at(c, y, 0));
        }
      }
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

inline MultiChannelImage reassemble_tiles(const std::vector<MultiChannelImage>& tiles, std::size_t rows, std::size_t cols) {
  if (tiles.size() != rows * cols || tiles.empty()) throw std::invalid_argument("reassemble_tiles: tile count mismatch");
  const std::size_t C = tiles[0].channels(), t = tiles[0].height();
  MultiChannelImage out(C, rows * t, cols * t);
  for (std::size_t ty = 0; ty < rows; ++ty) {
    for (std::size_t tx = 0; tx < cols; ++tx) {
      const auto& tile = tiles[ty * cols + tx];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < t; ++y) {
          std::copy_n(&tile.at(c, y, 0), t, &out.at(c, ty * t + y, tx * t));
        }
      }
    }
  }
  return out;
}

struct FlipPair {
  bool horizontal = false;
  bool vertical = false;
};

inline FlipPair draw_flips(CounterRng& rng) {
  FlipPair f;
  f.horizontal = rng.bernoulli(0.5);
  f.vertical = rng.bernoulli(0.5);
  return f;
}

inline MultiChannelImage flip_image(const MultiChannelImage& image, FlipPair f) {
  const std::size_t C = image.channels(), H = image.height(), W = image.width();
  MultiChannelImage out(C, H, W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        out.at(c, f.vertical ? H - 1 - y : y, f.horizontal ? W - 1 - x : x) = image.at(c, y, x);
      }
    }
  }
  return out;
}

inline LabelMap flip_labels(const LabelMap& labels, FlipPair f) {
  LabelMap out(labels.height, labels.width);
  for (std::size_t y = 0; y < labels.height; ++y) {
    for (std::size_t x = 0; x < labels.width; ++x) {
      out.at(f.vertical ? labels.height - 1 - y : y, f.horizontal ? labels.width - 1 - x : x) = labels.at(y, x);
    }
  }
  return out;
}

/// One flip pair drawn (p = 0.5 each) and applied to both image and label.
inline std::pair<MultiChannelImage, LabelMap> paired_flip_augment(const MultiChannelImage& image, const LabelMap& label,
                                                                  CounterRng& rng) {
  if (image.height() != label.height || image.width() != label.width) {
    throw_shape_mismatch("paired_flip_augment", Shape{image.height(), image.width()}, Shape{label.height, label.width});
  }
  const FlipPair f = draw_flips(rng);
  return {flip_image(image, f), flip_labels(label, f)};
}

// ---------------------------------------------------------------------------
// Partitioning

enum class Split : std::uint8_t { none, train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::none: break;
  }
  return "-";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "-") return Split::none;
  throw std::invalid_argument("unknown split tag '" + s + "'");
}

/// Random disjoint split with floor-sized val/test; the remainder goes to train.
inline std::vector<Split> split_indices(std::size_t n, double train_frac, double val_frac, double test_frac, CounterRng rng) {
  if (n < 10) throw std::invalid_argument("split_dataset: need at least 10 items, got " + std::to_string(n));
  if (train_frac < 0 || val_frac < 0 || test_frac < 0 || std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: fractions must be non-negative and sum to 1");
  }
  const auto n_val = static_cast<std::size_t>(std::floor(double(n) * val_frac + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(double(n) * test_frac + 1e-9));
  const auto order = rng.permutation(n);
  std::vector<Split> out(n, Split::train);
  for (std::size_t i = 0; i < n_val; ++i) out[order[i]] = Split::val;
  for (std::size_t i = n_val; i < n_val + n_test; ++i) out[order[i]] = Split::test;
  return out;
}

/// Shuffled items dealt round-robin into k folds (sizes differ by at most one).
inline std::vector<std::size_t> kfold_indices(std::size_t n, std::size_t k, CounterRng rng) {
  if (k < 2) throw std::invalid_argument("kfold: k must be at least 2");
  if (n < k) throw std::invalid_argument("kfold: " + std::to_string(n) + " items cannot fill " + std::to_string(k) + " folds");
  const auto order = rng.permutation(n);
  std::vector<std::size_t> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = i % k;
  return fold;
}

}  // namespace hemaseg
