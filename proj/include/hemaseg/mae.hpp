#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hemaseg/rng.hpp"
#include "hemaseg/vit.hpp"

namespace hemaseg {

enum class ReconstructionLoss { l1, l2 };

struct MAEConfig {
  ViTConfig vit;
  ViTConfig decoder;  // ignored when symmetric; geometry fields always come from `vit`
  double mask_ratio = 0.75;
  bool norm_pix = true;
  bool loss_on_masked_only = true;
  ReconstructionLoss loss = ReconstructionLoss::l1;
  bool symmetric = true;

  /// Decoder configuration with the geometry fields synchronized to the encoder.
  [[nodiscard]] ViTConfig decoder_config() const {
    ViTConfig d = symmetric ? vit : decoder;
    d.image_size = vit.image_size;
    d.patch_size = vit.patch_size;
    d.channels = vit.channels;
    d.use_cls_token = vit.use_cls_token;
    return d;
  }

  void validate() const {
    vit.validate();
    decoder_config().validate();
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
      throw ConfigError("mae.mask_ratio: must lie strictly between 0 and 1, got " + std::to_string(mask_ratio));
    }
  }
};

/// floor(N·(1 - r)); the tiny offset absorbs binary rounding of 1 - r.
inline std::size_t keep_count(std::size_t n, double mask_ratio) {
  return static_cast<std::size_t>(std::floor(double(n) * (1.0 - mask_ratio) + 1e-9));
}

struct MaskingResult {
  std::vector<std::size_t> ids_shuffle;
  std::vector<std::size_t> ids_restore;
  std::vector<std::uint8_t> mask;  // 1 = masked
  std::size_t keep_count = 0;

  friend bool operator==(const MaskingResult&, const MaskingResult&) = default;
};

/// Uniform random permutation; the first keep_count shuffled indices are visible.
inline MaskingResult draw_mask(std::size_t n, double mask_ratio, CounterRng& rng) {
  if (n < 2) throw std::invalid_argument("random_masking: need at least 2 tokens");
  const std::size_t keep = keep_count(n, mask_ratio);
  if (keep == 0) {
    throw std::invalid_argument("random_masking: mask ratio " + std::to_string(mask_ratio) +
                                " leaves no visible token out of " + std::to_string(n));
  }
  MaskingResult m;
  m.keep_count = keep;
  m.ids_shuffle = rng.permutation(n);
  m.ids_restore.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.ids_restore[m.ids_shuffle[i]] = i;
  m.mask.assign(n, 0);
  for (std::size_t i = keep; i < n; ++i) m.mask[m.ids_shuffle[i]] = 1;
  return m;
}

/// tokens [N, D] (no class token) -> (visible [keep, D] in shuffled order, masking).
template <typename T>
std::pair<Tensor<T>, MaskingResult> random_masking(const Tensor<T>& tokens, double mask_ratio, CounterRng& rng) {
  if (tokens.rank() != 2) throw ShapeError("random_masking: expected [N, D], got " + to_string(tokens.shape()));
  MaskingResult m = draw_mask(tokens.dim(0), mask_ratio, rng);
  const std::size_t D = tokens.dim(1);
  Tensor<T> visible(Shape{m.keep_count, D});
  for (std::size_t i = 0; i < m.keep_count; ++i) {
    std::copy_n(tokens.ptr() + m.ids_shuffle[i] * D, D, visible.ptr() + i * D);
  }
  return {std::move(visible), std::move(m)};
}

/// Encoder over visible patches + symmetric decoder over all slots with a learned mask token.
template <typename T>
struct MaskedAutoencoder {
  MAEConfig config;
  VitEncoder<T> encoder;
  nn::Linear<T> decoder_embed;
  Parameter<T> mask_token;
  TransformerStack<T> decoder;
  nn::Linear<T> decoder_pred;
  Tensor<T> decoder_position_table;

  MaskedAutoencoder() = default;
  explicit MaskedAutoencoder(const MAEConfig& c)
      : config((c.validate(), c)),
        encoder(c.vit),
        decoder_embed(c.vit.embed_dim, c.decoder_config().embed_dim),
        mask_token({1, c.decoder_config().embed_dim}, Init::trunc_normal, 0.02),
        decoder(c.decoder_config()),
        decoder_pred(c.decoder_config().embed_dim, c.vit.patch_dim()),
        decoder_position_table(sincos_position_embedding<T>(c.vit.grid(), c.vit.grid(), c.decoder_config().embed_dim)) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    encoder.visit(nn::join(prefix, "encoder"), f);
    decoder_embed.visit(nn::join(prefix, "decoder.embed"), f);
    f(nn::join(prefix, "decoder.mask_token"), mask_token);
    decoder.visit(nn::join(prefix, "decoder"), f);
    decoder_pred.visit(nn::join(prefix, "decoder.pred"), f);
  }

  /// images [B, C, H, W], one masking per sample -> predicted patches [B, N, p²C].
  Var<T> forward(Tape<T>& tape, const Tensor<T>& images, const std::vector<MaskingResult>& masks) {
    const std::size_t B = images.dim(0);
    const std::size_t N = config.vit.num_patches(), E = config.vit.embed_dim;
    if (masks.size() != B) throw std::invalid_argument("mae.forward: one masking per sample required");
    const std::size_t keep = masks[0].keep_count;
    for (const auto& m : masks) {
      if (m.mask.size() != N || m.keep_count != keep) {
        throw std::invalid_argument("mae.forward: masking does not match " + std::to_string(N) + " patches");
      }
    }
    Var<T> tokens = reshape(encoder.embed(tape, images), Shape{B * N, E});
    std::vector<std::size_t> visible_rows;
    visible_rows.reserve(B * keep);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < keep; ++i) visible_rows.push_back(b * N + masks[b].ids_shuffle[i]);
    }
    Var<T> visible = reshape(gather_rows(tokens, std::move(visible_rows)), Shape{B, keep, E});
    EncoderOutput<T> enc = encoder.encode(tape, encoder.with_cls(tape, visible));

    const bool cls = enc.final.has_cls;
    const std::size_t lead = cls ? 1 : 0, n_enc = keep + lead;
    const std::size_t Ed = config.decoder_config().embed_dim;
    Var<T> x = reshape(decoder_embed(tape, enc.final.tokens), Shape{B * n_enc, Ed});
    Var<T> pool = concat<T>({x, tape.param(mask_token)}, 0);
    const std::size_t mask_row = B * n_enc;
    std::vector<std::size_t> order;
    order.reserve(B * (N + lead));
    for (std::size_t b = 0; b < B; ++b) {
      if (cls) order.push_back(b * n_enc);
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t rank = masks[b].ids_restore[n];
        order.push_back(rank < keep ? b * n_enc + lead + rank : mask_row);
      }
    }
    Var<T> full = reshape(gather_rows(pool, std::move(order)), Shape{B, N + lead, Ed});
    Tensor<T> pos = decoder_position_table;
    if (cls) {
      Tensor<T> with_zero(Shape{N + 1, Ed});
      std::copy_n(pos.ptr(), pos.size(), with_zero.ptr() + Ed);
      pos = std::move(with_zero);
    }
    full = add(full, tape.constant(std::move(pos)));
    Var<T> decoded = decoder(tape, full, {}, nullptr);
    Var<T> pred = decoder_pred(tape, decoded);
    if (!cls) return pred;
    return strip_cls(TokenSequence<T>{pred, config.vit.grid(), config.vit.grid(), true}).tokens;
  }

  /// Draws one masking per sample from `rng.fork(sample_ids[b])` and runs forward.
  std::pair<Var<T>, std::vector<MaskingResult>> forward(Tape<T>& tape, const Tensor<T>& images, const CounterRng& rng,
                                                        const std::vector<std::uint64_t>& sample_ids) {
    std::vector<MaskingResult> masks;
    for (auto id : sample_ids) {
      CounterRng r = rng.fork(id);
      masks.push_back(draw_mask(config.vit.num_patches(), config.mask_ratio, r));
    }
    Var<T> pred = forward(tape, images, masks);
    return {pred, std::move(masks)};
  }
};

/// Per-patch standardization target, [B, N, D]. Matches the reference norm-pix
/// convention: unbiased variance, (x - mean) / sqrt(var + 1e-6).
template <typename T>
Tensor<T> reconstruction_target(const Tensor<T>& images, std::size_t patch_size, bool norm_pix) {
  Tensor<T> target = patchify(images, patch_size);
  if (!norm_pix) return target;
  const std::size_t D = target.dim(2), rows = target.size() / D;
  for (std::size_t r = 0; r < rows; ++r) {
    T* x = target.ptr() + r * D;
    double mean = 0;
    for (std::size_t j = 0; j < D; ++j) mean += x[j];
    mean /= double(D);
    double var = 0;
    for (std::size_t j = 0; j < D; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= double(D > 1 ? D - 1 : 1);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (std::size_t j = 0; j < D; ++j) x[j] = static_cast<T>((x[j] - mean) * inv);
  }
  return target;
}

/// Mean over selected patches of the per-patch mean error (absolute or squared).
template <typename T>
Var<T> reconstruction_loss(Tape<T>& tape, Var<T> pred, const Tensor<T>& images,
                           const std::vector<MaskingResult>& masks, const MAEConfig& config) {
  Tensor<T> target = reconstruction_target(images, config.vit.patch_size, config.norm_pix);
  if (pred.shape() != target.shape()) throw_shape_mismatch("reconstruction_loss", pred.shape(), target.shape());
  const std::size_t B = target.dim(0), N = target.dim(1), D = target.dim(2);
  if (masks.size() != B) throw std::invalid_argument("reconstruction_loss: one masking per sample required");
  std::size_t selected = 0;
  for (const auto& m : masks) {
    if (m.mask.size() != N) {
      throw std::invalid_argument("reconstruction_loss: masking length " + std::to_string(m.mask.size()) +
                                  " != patch count " + std::to_string(N));
    }
    for (auto v : m.mask) selected += config.loss_on_masked_only ? v : 1;
  }
  if (selected == 0) throw std::invalid_argument("reconstruction_loss: no patch selected");
  Tensor<T> weight(target.shape());
  const T w = T(1.0 / (double(selected) * double(D)));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n) {
      if (config.loss_on_masked_only && !masks[b].mask[n]) continue;
      std::fill_n(weight.ptr() + (b * N + n) * D, D, w);
    }
  }
  Var<T> diff = sub(pred, tape.constant(std::move(target)));
  Var<T> err = config.loss == ReconstructionLoss::l1 ? abs(diff) : mul(diff, diff);
  return sum(mul(err, tape.constant(std::move(weight))));
}

/// Image-space reconstruction [B, C, H, W]: visible patches are copied from
/// `images`, masked ones come from `pred`, mapped back through each patch's
/// own statistics when the target is normalized.
template <typename T>
Tensor<T> reconstruct_images(const Tensor<T>& pred, const Tensor<T>& images, const std::vector<MaskingResult>& masks,
                             const MAEConfig& config) {
  const std::size_t p = config.vit.patch_size;
  Tensor<T> patches = patchify(images, p);
  if (pred.shape() != patches.shape()) throw_shape_mismatch("reconstruct_images", pred.shape(), patches.shape());
  const std::size_t B = patches.dim(0), N = patches.dim(1), D = patches.dim(2);
  if (masks.size() != B) throw std::invalid_argument("reconstruct_images: one masking per sample required");
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n) {
      if (!masks[b].mask.at(n)) continue;
      T* x = patches.ptr() + (b * N + n) * D;
      const T* y = pred.ptr() + (b * N + n) * D;
      double mean = 0, inv_scale = 1;
      if (config.norm_pix) {
        for (std::size_t j = 0; j < D; ++j) mean += x[j];
        mean /= double(D);
        double var = 0;
        for (std::size_t j = 0; j < D; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= double(D > 1 ? D - 1 : 1);
        inv_scale = std::sqrt(var + 1e-6);
      }
      for (std::size_t j = 0; j < D; ++j) x[j] = static_cast<T>(config.norm_pix ? y[j] * inv_scale + mean : y[j]);
    }
  }
  const std::size_t g = config.vit.grid();
  return unpatchify(patches, p, images.dim(1), g, g);
}

}  // namespace hemaseg
