#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hemaseg/autodiff/ops.hpp"
#include "hemaseg/image.hpp"
#include "hemaseg/nn/layers.hpp"

namespace hemaseg {

struct ViTConfig {
  std::size_t image_size = 64;
  std::size_t channels = kNumChannels;
  std::size_t patch_size = 2;
  std::size_t embed_dim = 192;
  std::size_t mlp_dim = 768;
  std::size_t num_layers = 6;
  std::size_t num_heads = 6;
  double layernorm_eps = 1e-6;
  bool use_cls_token = true;

  [[nodiscard]] std::size_t grid() const { return image_size / patch_size; }
  [[nodiscard]] std::size_t num_patches() const { return grid() * grid(); }
  [[nodiscard]] std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("vit.patch_size: image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (num_heads == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("vit.num_heads: embed_dim must be divisible by num_heads");
    }
    if (embed_dim == 0 || embed_dim % 4 != 0) {
      throw ConfigError("vit.embed_dim: must be a positive multiple of 4");
    }
    if (num_layers == 0) throw ConfigError("vit.num_layers: must be positive");
    if (mlp_dim == 0) throw ConfigError("vit.mlp_dim: must be positive");
    if (channels == 0) throw ConfigError("vit.channels: must be positive");
    if (!(layernorm_eps > 0.0)) throw ConfigError("vit.layernorm_eps: must be positive");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

// ---------------------------------------------------------------------------
// Patches. A patch vector is laid out (patch row, patch col, channel), row-major.

/// images: [B, C, H, W] -> [B, N, p·p·C], patches in row-major grid order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t p) {
  if (images.rank() != 4) throw ShapeError("patchify: expected [B, C, H, W], got " + to_string(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (p == 0 || H % p != 0 || W % p != 0) {
    throw ShapeError("patchify: image " + to_string(images.shape()) + " not divisible by patch size " +
                     std::to_string(p));
  }
  const std::size_t gh = H / p, gw = W / p, D = p * p * C;
  Tensor<T> out(Shape{B, gh * gw, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        T* dst = out.ptr() + (b * gh * gw + gy * gw + gx) * D;
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            for (std::size_t c = 0; c < C; ++c) {
              dst[(i * p + j) * C + c] = images[((b * C + c) * H + gy * p + i) * W + gx * p + j];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Single image overload: returns [N, p·p·C].
inline Tensor<float> patchify(const MultiChannelImage& image, std::size_t p) {
  const Shape s = image.pixels.shape();
  Tensor<float> batched = image.pixels.reshaped({1, s[0], s[1], s[2]});
  Tensor<float> out = patchify(batched, p);
  return out.reshaped({out.dim(1), out.dim(2)});
}

/// Inverse of patchify. patches: [B, N, D] or [N, D] with D = channels·p², N = rows·cols.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t p, std::size_t channels, std::size_t rows,
                     std::size_t cols) {
  const bool batched = patches.rank() == 3;
  if (!batched && patches.rank() != 2) throw ShapeError("unpatchify: expected [B, N, D] or [N, D], got " + to_string(patches.shape()));
  const std::size_t B = batched ? patches.dim(0) : 1;
  const std::size_t N = patches.dim(batched ? 1 : 0), D = patches.dim(batched ? 2 : 1);
  if (D != channels * p * p) {
    throw ShapeError("unpatchify: patch dim " + std::to_string(D) + " != channels·p² = " +
                     std::to_string(channels * p * p));
  }
  if (N != rows * cols) throw ShapeError("unpatchify: " + std::to_string(N) + " patches do not fill the grid");
  const std::size_t H = rows * p, W = cols * p, C = channels;
  Tensor<T> out(batched ? Shape{B, C, H, W} : Shape{C, H, W});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t gy = 0; gy < rows; ++gy) {
      for (std::size_t gx = 0; gx < cols; ++gx) {
        const T* src = patches.ptr() + (b * N + gy * cols + gx) * D;
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            for (std::size_t c = 0; c < C; ++c) {
              out[((b * C + c) * H + gy * p + i) * W + gx * p + j] = src[(i * p + j) * C + c];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Fixed 2-D sine-cosine table, [rows·cols, embed_dim]. The first half of the
/// features encodes the row index, the second half the column; each half is
/// [sin(ω_k·pos) for k] followed by [cos(ω_k·pos) for k], ω_k = 10000^(-k/(dim/4)).
template <typename T>
Tensor<T> sincos_position_embedding(std::size_t rows, std::size_t cols, std::size_t embed_dim) {
  if (embed_dim == 0 || embed_dim % 4 != 0) {
    throw ConfigError("sincos_position_embedding: embed_dim " + std::to_string(embed_dim) +
                      " is not divisible by 4");
  }
  const std::size_t half = embed_dim / 2, quarter = embed_dim / 4;
  Tensor<T> table(Shape{rows * cols, embed_dim});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      T* row = table.ptr() + (r * cols + c) * embed_dim;
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, double(k) / double(quarter));
        row[k] = static_cast<T>(std::sin(omega * double(r)));
        row[quarter + k] = static_cast<T>(std::cos(omega * double(r)));
        row[half + k] = static_cast<T>(std::sin(omega * double(c)));
        row[half + quarter + k] = static_cast<T>(std::cos(omega * double(c)));
      }
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Transformer

/// Tokens [B, n, E] on a rows×cols patch grid, optionally led by a class token.
template <typename T>
struct TokenSequence {
  Var<T> tokens;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool has_cls = false;

  [[nodiscard]] std::size_t batch() const { return tokens.shape()[0]; }
  [[nodiscard]] std::size_t length() const { return tokens.shape()[1]; }
};

/// Drops the leading class token, if any: [B, 1+n, E] -> [B, n, E].
template <typename T>
TokenSequence<T> strip_cls(const TokenSequence<T>& seq) {
  if (!seq.has_cls) return seq;
  const Shape& s = seq.tokens.shape();
  const std::size_t B = s[0], n = s[1], E = s[2];
  std::vector<std::size_t> rows;
  rows.reserve(B * (n - 1));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 1; i < n; ++i) rows.push_back(b * n + i);
  }
  Var<T> flat = reshape(seq.tokens, Shape{B * n, E});
  return {reshape(gather_rows(flat, std::move(rows)), Shape{B, n - 1, E}), seq.rows, seq.cols, false};
}

template <typename T>
struct MultiHeadSelfAttention {
  nn::Linear<T> query, key, value, output;
  std::size_t heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(std::size_t dim, std::size_t num_heads)
      : query(dim, dim), key(dim, dim), value(dim, dim), output(dim, dim), heads(num_heads) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    query.visit(nn::join(prefix, "query"), f);
    key.visit(nn::join(prefix, "key"), f);
    value.visit(nn::join(prefix, "value"), f);
    output.visit(nn::join(prefix, "output"), f);
  }

  /// x: [B, N, E]. If `probs` is given, the attention weights [B·heads, N, N] are copied out.
  Var<T> operator()(Tape<T>& tape, Var<T> x, Tensor<T>* probs = nullptr) {
    const std::size_t B = x.shape()[0], N = x.shape()[1], E = x.shape()[2], D = E / heads;
    auto split = [&](Var<T> v) {
      return reshape(permute(reshape(v, Shape{B, N, heads, D}), {0, 2, 1, 3}), Shape{B * heads, N, D});
    };
    Var<T> q = split(query(tape, x));
    Var<T> k = split(key(tape, x));
    Var<T> v = split(value(tape, x));
    Var<T> scores = scale(matmul(q, transpose(k)), T(1.0 / std::sqrt(double(D))));
    Var<T> p = softmax(scores);
    if (probs) *probs = p.value();
    Var<T> ctx = matmul(p, v);
    ctx = reshape(permute(reshape(ctx, Shape{B, heads, N, D}), {0, 2, 1, 3}), Shape{B, N, E});
    return output(tape, ctx);
  }
};

/// Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x)) with a GELU MLP.
template <typename T>
struct TransformerBlock {
  nn::LayerNorm<T> norm1;
  MultiHeadSelfAttention<T> attn;
  nn::LayerNorm<T> norm2;
  nn::Linear<T> fc1, fc2;

  TransformerBlock() = default;
  explicit TransformerBlock(const ViTConfig& c)
      : norm1(c.embed_dim, c.layernorm_eps),
        attn(c.embed_dim, c.num_heads),
        norm2(c.embed_dim, c.layernorm_eps),
        fc1(c.embed_dim, c.mlp_dim),
        fc2(c.mlp_dim, c.embed_dim) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(nn::join(prefix, "norm1"), f);
    attn.visit(nn::join(prefix, "attn"), f);
    norm2.visit(nn::join(prefix, "norm2"), f);
    fc1.visit(nn::join(prefix, "mlp.fc1"), f);
    fc2.visit(nn::join(prefix, "mlp.fc2"), f);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, Tensor<T>* probs = nullptr) {
    x = add(x, attn(tape, norm1(tape, x), probs));
    return add(x, fc2(tape, gelu(fc1(tape, norm2(tape, x)))));
  }
};

/// A stack of blocks with a final LayerNorm. Shared by the MAE decoder.
template <typename T>
struct TransformerStack {
  std::vector<TransformerBlock<T>> blocks;
  nn::LayerNorm<T> norm;

  TransformerStack() = default;
  explicit TransformerStack(const ViTConfig& c) : blocks(c.num_layers, TransformerBlock<T>(c)), norm(c.embed_dim, c.layernorm_eps) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(nn::join(prefix, "blocks." + std::to_string(i)), f);
    norm.visit(nn::join(prefix, "norm"), f);
  }

  /// Runs all blocks; hidden[l] (1-based) is block l's output before the final norm.
  Var<T> operator()(Tape<T>& tape, Var<T> x, const std::set<std::size_t>& taps,
                    std::map<std::size_t, Var<T>>* hidden, std::vector<Tensor<T>>* probs = nullptr) {
    for (std::size_t l = 1; l <= blocks.size(); ++l) {
      Tensor<T> p;
      x = blocks[l - 1](tape, x, probs ? &p : nullptr);
      if (probs) probs->push_back(std::move(p));
      if (hidden && taps.contains(l)) hidden->emplace(l, x);
    }
    return norm(tape, x);
  }
};

template <typename T>
struct EncoderOutput {
  TokenSequence<T> final;  // after the final LayerNorm
  std::map<std::size_t, TokenSequence<T>> hidden;
};

/// Patch embedding + fixed sin-cos positions + optional class token + blocks.
template <typename T>
struct VitEncoder {
  ViTConfig config;
  nn::Linear<T> patch_embed;
  Parameter<T> cls_token;
  TransformerStack<T> stack;
  Tensor<T> position_table;  // [N, E], not trainable

  VitEncoder() = default;
  explicit VitEncoder(const ViTConfig& c)
      : config((c.validate(), c)),
        patch_embed(c.patch_dim(), c.embed_dim),
        stack(c),
        position_table(sincos_position_embedding<T>(c.grid(), c.grid(), c.embed_dim)) {
    if (c.use_cls_token) cls_token = Parameter<T>({1, c.embed_dim}, Init::trunc_normal, 0.02);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    patch_embed.visit(nn::join(prefix, "patch_embed"), f);
    if (config.use_cls_token) f(nn::join(prefix, "cls_token"), cls_token);
    stack.visit(prefix, f);
  }

  /// images [B, C, H, W] -> patch tokens + positions, [B, N, E] (no class token).
  Var<T> embed(Tape<T>& tape, const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(1) != config.channels || images.dim(2) != config.image_size ||
        images.dim(3) != config.image_size) {
      throw_shape_mismatch("vit.embed", images.shape(),
                           Shape{0, config.channels, config.image_size, config.image_size});
    }
    Var<T> patches = tape.constant(patchify(images, config.patch_size));
    return add(patch_embed(tape, patches), tape.constant(position_table));
  }

  /// Prepends the class token (its positional row is zero) when configured.
  TokenSequence<T> with_cls(Tape<T>& tape, Var<T> tokens) {
    const std::size_t B = tokens.shape()[0], E = tokens.shape()[2];
    if (!config.use_cls_token) return {tokens, config.grid(), config.grid(), false};
    Var<T> cls = reshape(gather_rows(tape.param(cls_token), std::vector<std::size_t>(B, 0)), Shape{B, 1, E});
    return {concat<T>({cls, tokens}, 1), config.grid(), config.grid(), true};
  }

  /// Runs the blocks. `taps` ⊆ {1..num_layers}; taps are returned with the class token stripped.
  EncoderOutput<T> encode(Tape<T>& tape, const TokenSequence<T>& tokens, const std::set<std::size_t>& taps = {},
                          std::vector<Tensor<T>>* probs = nullptr) {
    for (auto l : taps) {
      if (l < 1 || l > config.num_layers) {
        throw std::out_of_range("vit.encode: tap " + std::to_string(l) + " outside 1.." +
                                std::to_string(config.num_layers));
      }
    }
    std::map<std::size_t, Var<T>> hidden;
    Var<T> out = stack(tape, tokens.tokens, taps, &hidden, probs);
    EncoderOutput<T> result{{out, tokens.rows, tokens.cols, tokens.has_cls}, {}};
    for (auto& [l, v] : hidden) {
      result.hidden.emplace(l, strip_cls(TokenSequence<T>{v, tokens.rows, tokens.cols, tokens.has_cls}));
    }
    return result;
  }

  EncoderOutput<T> forward(Tape<T>& tape, const Tensor<T>& images, const std::set<std::size_t>& taps = {}) {
    return encode(tape, with_cls(tape, embed(tape, images)), taps);
  }
};

}  // namespace hemaseg
