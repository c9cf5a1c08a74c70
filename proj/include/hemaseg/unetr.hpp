#pragma once

#include <bit>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hemaseg/image.hpp"
#include "hemaseg/vit.hpp"

namespace hemaseg {

enum class EncoderInit { random, pretrained };

struct UNETRConfig {
  ViTConfig vit;
  std::size_t feature_size = 16;
  std::size_t num_classes = kNumClasses;
  EncoderInit encoder_init = EncoderInit::random;
  std::size_t freeze_epochs = 0;
  /// Explicit encoder taps; empty means derived from patch size.
  std::vector<std::size_t> taps_override;

  /// Number of ×2 upsampling stages, log2(patch_size).
  [[nodiscard]] std::size_t stages() const { return static_cast<std::size_t>(std::countr_zero(vit.patch_size)); }

  /// Encoder layer feeding decoder ladder level k (k = stages() is the token grid).
  /// With 6 layers: p=2 -> {6}, p=4 -> {3, 6}, p=8 -> {2, 4, 6}.
  [[nodiscard]] std::size_t tap_for_level(std::size_t k) const { return vit.num_layers * k / stages(); }

  [[nodiscard]] std::vector<std::size_t> derived_taps() const {
    std::vector<std::size_t> t;
    for (std::size_t k = 1; k <= stages(); ++k) t.push_back(tap_for_level(k));
    return t;
  }

  [[nodiscard]] std::vector<std::size_t> taps() const { return taps_override.empty() ? derived_taps() : taps_override; }

  /// Decoder width at ladder level k (k = 0 is full resolution).
  [[nodiscard]] std::size_t width(std::size_t k) const { return feature_size << k; }

  void validate() const {
    vit.validate();
    if (vit.patch_size < 2 || !std::has_single_bit(vit.patch_size)) {
      throw ConfigError("unetr.patch_size: must be a power of two >= 2, got " + std::to_string(vit.patch_size));
    }
    if (feature_size == 0) throw ConfigError("unetr.feature_size: must be positive");
    if (num_classes < 2) throw ConfigError("unetr.num_classes: must be at least 2");
    if (vit.num_layers < stages()) {
      throw ConfigError("unetr.taps: " + std::to_string(vit.num_layers) + " layers cannot feed " +
                        std::to_string(stages()) + " decoder stages");
    }
    const auto t = taps();
    const auto d = derived_taps();
    if (t.size() != d.size() || t.back() != vit.num_layers) {
      throw ConfigError("unetr.taps: patch size " + std::to_string(vit.patch_size) + " needs " +
                        std::to_string(d.size()) + " taps ending at layer " + std::to_string(vit.num_layers));
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] < 1 || (i > 0 && t[i] <= t[i - 1])) throw ConfigError("unetr.taps: must be strictly increasing and >= 1");
    }
  }
};

/// (3×3 conv -> instance norm -> ReLU) twice.
template <typename T>
struct ConvBlock {
  nn::Conv2d<T> conv1, conv2;

  ConvBlock() = default;
  ConvBlock(std::size_t in, std::size_t out)
      : conv1(in, out, 3, {.stride = 1, .pad = 1}, false), conv2(out, out, 3, {.stride = 1, .pad = 1}, false) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    conv1.visit(nn::join(prefix, "conv1"), f);
    conv2.visit(nn::join(prefix, "conv2"), f);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    x = relu(instance_norm(conv1(tape, x)));
    return relu(instance_norm(conv2(tape, x)));
  }
};

/// Brings an intermediate token map up to its ladder level: a bare transposed
/// conv, then (transposed conv + conv block) for every further doubling.
template <typename T>
struct TapProjection {
  nn::UpConv2d<T> first;
  std::vector<nn::UpConv2d<T>> ups;
  std::vector<ConvBlock<T>> blocks;

  TapProjection() = default;
  TapProjection(std::size_t in, std::size_t out, std::size_t doublings) : first(in, out) {
    for (std::size_t i = 1; i < doublings; ++i) {
      ups.emplace_back(out, out);
      blocks.emplace_back(out, out);
    }
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    first.visit(nn::join(prefix, "up0"), f);
    for (std::size_t i = 0; i < ups.size(); ++i) {
      ups[i].visit(nn::join(prefix, "up" + std::to_string(i + 1)), f);
      blocks[i].visit(nn::join(prefix, "block" + std::to_string(i + 1)), f);
    }
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    x = first(tape, x);
    for (std::size_t i = 0; i < ups.size(); ++i) x = blocks[i](tape, ups[i](tape, x));
    return x;
  }
};

/// Upsample, concatenate the skip, fuse.
template <typename T>
struct DecoderStage {
  nn::UpConv2d<T> up;
  ConvBlock<T> fuse;

  DecoderStage() = default;
  DecoderStage(std::size_t in, std::size_t out) : up(in, out), fuse(2 * out, out) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    up.visit(nn::join(prefix, "up"), f);
    fuse.visit(nn::join(prefix, "fuse"), f);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, Var<T> skip) {
    return fuse(tape, concat<T>({up(tape, x), skip}, 1));
  }
};

/// 2-D UNETR. Ladder level k has resolution image/2^k and width f·2^k; level
/// stages() is the token grid. The deepest map is the encoder output; each
/// intermediate level k is fed by encoder layer tap_for_level(k); level 0 by a
/// conv block on the raw image.
template <typename T>
struct Unetr {
  UNETRConfig config;
  VitEncoder<T> encoder;
  ConvBlock<T> stem;
  std::vector<TapProjection<T>> projections;  // index k-1 for level k in [1, stages)
  std::vector<DecoderStage<T>> stages;        // index k-1 upsamples level k -> k-1
  nn::Conv2d<T> head;

  Unetr() = default;
  explicit Unetr(const UNETRConfig& c)
      : config((c.validate(), c)),
        encoder(c.vit),
        stem(c.vit.channels, c.feature_size),
        head(c.feature_size, c.num_classes, 1, {}, true) {
    const std::size_t S = c.stages(), E = c.vit.embed_dim;
    for (std::size_t k = 1; k < S; ++k) projections.emplace_back(E, c.width(k), S - k);
    for (std::size_t k = 1; k <= S; ++k) stages.emplace_back(k == S ? E : c.width(k), c.width(k - 1));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    encoder.visit(nn::join(prefix, "encoder"), f);
    stem.visit(nn::join(prefix, "decoder.stem"), f);
    for (std::size_t i = 0; i < projections.size(); ++i) {
      projections[i].visit(nn::join(prefix, "decoder.skip" + std::to_string(i + 1)), f);
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
      stages[i].visit(nn::join(prefix, "decoder.stage" + std::to_string(i + 1)), f);
    }
    head.visit(nn::join(prefix, "decoder.head"), f);
  }

  /// Visits only the decoder side (everything but the ViT encoder).
  template <typename F>
  void visit_decoder(F&& f) {
    visit("", [&](const std::string& name, Parameter<T>& p) {
      if (!name.starts_with("encoder.")) f(name, p);
    });
  }

  /// images [B, C, H, W] -> logits [B, num_classes, H, W].
  Var<T> forward(Tape<T>& tape, const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(1) != config.vit.channels) {
      throw ShapeError("unetr.forward: expected [B, " + std::to_string(config.vit.channels) + ", H, W], got " +
                       to_string(images.shape()));
    }
    const auto taps = config.taps();
    EncoderOutput<T> enc = encoder.forward(tape, images, std::set<std::size_t>(taps.begin(), taps.end() - 1));
    const std::size_t S = config.stages();
    Var<T> x = to_map(strip_cls(enc.final));
    for (std::size_t k = S; k >= 1; --k) {
      Var<T> skip = k == 1 ? stem(tape, tape.constant(images))
                           : projections[k - 2](tape, to_map(enc.hidden.at(taps[k - 2])));
      x = stages[k - 1](tape, x, skip);
    }
    return head(tape, x);
  }

 private:
  static Var<T> to_map(const TokenSequence<T>& seq) {
    const Shape& s = seq.tokens.shape();
    return reshape(permute(seq.tokens, {0, 2, 1}), Shape{s[0], s[2], seq.rows, seq.cols});
  }
};

/// Softmax cross-entropy averaged over labeled pixels. logits [B, K, H, W].
template <typename T>
Var<T> sparse_cross_entropy(Tape<T>& tape, Var<T> logits, const std::vector<SparseLabelMask>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 4 || labels.size() != s[0]) {
    throw ShapeError("sparse_cross_entropy: logits " + to_string(s) + " vs " + std::to_string(labels.size()) + " label maps");
  }
  const std::size_t B = s[0], K = s[1], H = s[2], W = s[3];
  std::vector<std::size_t> rows;
  std::vector<std::uint8_t> cls;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b].height != H || labels[b].width != W) {
      throw_shape_mismatch("sparse_cross_entropy", Shape{H, W}, Shape{labels[b].height, labels[b].width});
    }
    for (std::size_t i = 0; i < H * W; ++i) {
      const auto c = labels[b].codes[i];
      if (c == kUnlabeled) continue;
      if (c >= K) throw std::invalid_argument("sparse_cross_entropy: class code " + std::to_string(c) + " out of range");
      rows.push_back(b * H * W + i);
      cls.push_back(c);
    }
  }
  if (rows.empty()) throw std::invalid_argument("sparse_cross_entropy: no labeled pixels");
  Var<T> flat = reshape(permute(logits, {0, 2, 3, 1}), Shape{B * H * W, K});
  Var<T> picked = log_softmax(gather_rows(flat, rows));
  Tensor<T> onehot(Shape{rows.size(), K});
  for (std::size_t i = 0; i < rows.size(); ++i) onehot[i * K + cls[i]] = T(1);
  return scale(sum(mul(picked, tape.constant(std::move(onehot)))), T(-1.0 / double(rows.size())));
}

/// Argmax over the class axis. logits [B, K, H, W] -> one map per sample.
template <typename T>
std::vector<LabelMap> argmax_classes(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  std::vector<LabelMap> out(B, LabelMap(H, W));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < H * W; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k) {
        if (logits[(b * K + k) * H * W + i] > logits[(b * K + best) * H * W + i]) best = k;
      }
      out[b].codes[i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace hemaseg
