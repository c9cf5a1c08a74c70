#include <cmath>
#include <set>
#include <tuple>

#include <gtest/gtest.h>

#include "hemaseg/hemaseg.hpp"
#include "oracles.hpp"

using namespace hemaseg;

namespace {

Tensor<float> random_images(std::size_t B, std::size_t C, std::size_t side, std::uint64_t seed) {
  CounterRng rng(seed, 5);
  Tensor<float> t(Shape{B, C, side, side});
  for (auto& v : t.storage()) v = float(rng.uniform());
  return t;
}

MAEConfig tiny_mae(std::size_t p = 4, double r = 0.5) {
  MAEConfig c;
  c.vit.patch_size = p;
  c.vit.embed_dim = 32;
  c.vit.mlp_dim = 64;
  c.vit.num_layers = 2;
  c.vit.num_heads = 2;
  c.mask_ratio = r;
  return c;
}

class Masking : public ::testing::TestWithParam<std::tuple<std::size_t, double>> {};

TEST_P(Masking, KeepCountAndInversePermutations) {
  const auto [n, r] = GetParam();
  EXPECT_EQ(keep_count(n, r), std::size_t(std::floor(double(n) * (1.0 - r) + 1e-9)));
  CounterRng rng(3, 4);
  for (int draw = 0; draw < 20; ++draw) {
    const auto m = draw_mask(n, r, rng);
    ASSERT_EQ(m.ids_shuffle.size(), n);
    std::size_t masked = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(m.ids_restore[m.ids_shuffle[i]], i);
      EXPECT_EQ(m.ids_shuffle[m.ids_restore[i]], i);
      masked += m.mask[i];
    }
    EXPECT_EQ(masked, n - m.keep_count);
    EXPECT_EQ(std::set<std::size_t>(m.ids_shuffle.begin(), m.ids_shuffle.end()).size(), n);
    for (std::size_t i = 0; i < m.keep_count; ++i) EXPECT_EQ(m.mask[m.ids_shuffle[i]], 0);
  }
}

TEST_P(Masking, EveryIndexIsMaskedAtTheNominalRate) {
  const auto [n, r] = GetParam();
  const auto f = oracle::mask_frequency(n, r, 10000, 11);
  EXPECT_TRUE(oracle::mask_frequency_ok(f)) << "max |z| " << f.max_abs_z << ", " << f.beyond_3sigma << " beyond 3 sigma";
}

INSTANTIATE_TEST_SUITE_P(Grid, Masking,
                         ::testing::Combine(::testing::Values(64, 256, 1024), ::testing::Values(0.5, 0.75, 0.9)));

TEST(Masking, KeepCountAnchors) {
  EXPECT_EQ(keep_count(1024, 0.75), 256u);
  EXPECT_EQ(keep_count(64, 0.9), 6u);
  EXPECT_EQ(keep_count(256, 0.9), 25u);
  EXPECT_EQ(keep_count(1024, 0.5), 512u);
}

TEST(Masking, RejectsRatiosThatHideEverything) {
  CounterRng rng(0, 0);
  EXPECT_THROW(draw_mask(64, 1.0, rng), std::invalid_argument);
  MAEConfig c = tiny_mae();
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.mask_ratio = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Masking, SameStreamSameMask) {
  CounterRng a(9, 1), b(9, 1), c(9, 2);
  EXPECT_EQ(draw_mask(256, 0.75, a), draw_mask(256, 0.75, b));
  CounterRng d(9, 1);
  EXPECT_NE(draw_mask(256, 0.75, c), draw_mask(256, 0.75, d));
}

TEST(Patches, RoundTripAndLayout) {
  for (std::size_t p : {2, 4, 8}) {
    const auto img = random_images(2, 16, 64, p);
    const auto patches = patchify(img, p);
    ASSERT_EQ(patches.shape(), (Shape{2, (64 / p) * (64 / p), 16 * p * p}));
    EXPECT_EQ(unpatchify(patches, p, 16, 64 / p, 64 / p), img);
  }
  // Patch (1, 0) of a 2x2 grid, in-patch pixel (1, 0), channel 2.
  const auto img = random_images(1, 3, 4, 1);
  const auto patches = patchify(img, 2);
  EXPECT_EQ(patches[(0 * 4 + 2) * 12 + (1 * 2 + 0) * 3 + 2], img[(2 * 4 + 3) * 4 + 0]);
  EXPECT_THROW(patchify(random_images(1, 3, 6, 1), 4), ShapeError);
}

TEST(Positions, SinCosTable) {
  const auto t = sincos_position_embedding<double>(4, 4, 16);
  ASSERT_EQ(t.shape(), (Shape{16, 16}));
  // Row 0, column 0: sines are 0, cosines are 1.
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(t[k], 0.0);
    EXPECT_DOUBLE_EQ(t[4 + k], 1.0);
  }
  // Position (row 2, col 3), frequency k = 1: omega = 10000^(-1/4).
  const double w = std::pow(10000.0, -0.25);
  const double* row = t.ptr() + (2 * 4 + 3) * 16;
  EXPECT_NEAR(row[1], std::sin(2 * w), 1e-15);
  EXPECT_NEAR(row[5], std::cos(2 * w), 1e-15);
  EXPECT_NEAR(row[9], std::sin(3 * w), 1e-15);
  EXPECT_NEAR(row[13], std::cos(3 * w), 1e-15);
  EXPECT_THROW(sincos_position_embedding<double>(4, 4, 10), ConfigError);
}

TEST(Target, NormPixUsesUnbiasedVariance) {
  const auto img = random_images(1, 2, 4, 7).cast<double>();
  const auto t = reconstruction_target(img, 2, true);
  const auto raw = patchify(img, 2);
  const std::size_t D = 8;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < D; ++j) m += raw[n * D + j];
    m /= D;
    for (std::size_t j = 0; j < D; ++j) v += (raw[n * D + j] - m) * (raw[n * D + j] - m);
    v /= D - 1;
    for (std::size_t j = 0; j < D; ++j) EXPECT_NEAR(t[n * D + j], (raw[n * D + j] - m) / std::sqrt(v + 1e-6), 1e-12);
  }
  EXPECT_EQ(reconstruction_target(img, 2, false), raw);
}

TEST(Loss, OnlyMaskedPatchesCount) {
  MAEConfig c = tiny_mae();
  const auto img = random_images(1, 16, 64, 3).cast<double>();
  CounterRng rng(1, 1);
  std::vector<MaskingResult> masks = {draw_mask(256, 0.5, rng)};
  Tape<double> tape;
  const auto target = reconstruction_target(img, 4, true);
  Tensor<double> pred = target;
  // Corrupt the visible patches only: the masked-only loss stays at zero.
  for (std::size_t n = 0; n < 256; ++n) {
    if (masks[0].mask[n]) continue;
    for (std::size_t j = 0; j < 256; ++j) pred[n * 256 + j] += 1.0;
  }
  EXPECT_DOUBLE_EQ(reconstruction_loss(tape, tape.constant(pred.reshaped(Shape{1, 256, 256})), img, masks, c).value()[0], 0.0);
  c.loss_on_masked_only = false;
  EXPECT_NEAR(reconstruction_loss(tape, tape.constant(pred.reshaped(Shape{1, 256, 256})), img, masks, c).value()[0], 0.5, 1e-12);
}

TEST(Model, ForwardShapesAcrossGrid) {
  for (std::size_t p : {2, 4, 8}) {
    for (double r : {0.5, 0.75, 0.9}) {
      MaskedAutoencoder<float> m(tiny_mae(p, r));
      nn::initialize<float>(m, 1);
      Tape<float> tape({.grad_enabled = false});
      const auto img = random_images(2, 16, 64, 2);
      auto [pred, masks] = m.forward(tape, img, CounterRng(1, 2), {0, 1});
      const std::size_t N = (64 / p) * (64 / p);
      ASSERT_EQ(pred.shape(), (Shape{2, N, 16 * p * p}));
      const auto recon = reconstruct_images(pred.value(), img, masks, m.config);
      EXPECT_EQ(recon.shape(), (Shape{2, 16, 64, 64}));
    }
  }
}

TEST(Model, ReconstructionKeepsVisiblePatches) {
  MaskedAutoencoder<float> m(tiny_mae());
  nn::initialize<float>(m, 4);
  Tape<float> tape({.grad_enabled = false});
  const auto img = random_images(1, 16, 64, 9);
  auto [pred, masks] = m.forward(tape, img, CounterRng(2, 2), {5});
  const auto recon = patchify(reconstruct_images(pred.value(), img, masks, m.config), 4);
  const auto orig = patchify(img, 4);
  std::size_t differing_masked = 0;
  for (std::size_t n = 0; n < 256; ++n) {
    bool same = true;
    for (std::size_t j = 0; j < 256; ++j) same = same && recon[n * 256 + j] == orig[n * 256 + j];
    if (!masks[0].mask[n]) EXPECT_TRUE(same) << n;
    differing_masked += masks[0].mask[n] && !same;
  }
  EXPECT_EQ(differing_masked, 128u);
}

TEST(Model, ClassTokenIsOptional) {
  MAEConfig c = tiny_mae();
  c.vit.use_cls_token = false;
  MaskedAutoencoder<float> m(c);
  nn::initialize<float>(m, 1);
  Tape<float> tape;
  const auto img = random_images(1, 16, 64, 2);
  auto [pred, masks] = m.forward(tape, img, CounterRng(1, 2), {0});
  EXPECT_EQ(pred.shape(), (Shape{1, 256, 256}));
  tape.backward(reconstruction_loss(tape, pred, img, masks, c));
}

TEST(Encoder, TapsDropTheClassToken) {
  ViTConfig v = tiny_mae().vit;
  v.num_layers = 3;
  VitEncoder<float> enc(v);
  nn::initialize<float>(enc, 1);
  Tape<float> tape({.grad_enabled = false});
  auto out = enc.forward(tape, random_images(2, 16, 64, 1), {1, 2});
  EXPECT_EQ(out.final.tokens.shape(), (Shape{2, 257, 32}));
  ASSERT_EQ(out.hidden.size(), 2u);
  EXPECT_EQ(out.hidden.at(1).tokens.shape(), (Shape{2, 256, 32}));
  EXPECT_THROW(enc.forward(tape, random_images(1, 16, 64, 1), {4}), std::out_of_range);
}

TEST(Attention, RowsAreDistributions) {
  ViTConfig v = tiny_mae().vit;
  TransformerBlock<double> block(v);
  nn::initialize<double>(block, 3);
  Tape<double> tape;
  Tensor<double> x(Shape{1, 5, 32});
  CounterRng rng(1, 1);
  for (auto& e : x.storage()) e = rng.normal();
  Tensor<double> probs;
  block(tape, tape.constant(x), &probs);
  ASSERT_EQ(probs.shape(), (Shape{2, 5, 5}));
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += probs[r * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

}  // namespace
