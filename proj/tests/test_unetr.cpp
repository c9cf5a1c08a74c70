#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "hemaseg/hemaseg.hpp"

using namespace hemaseg;

namespace {

UNETRConfig base_unetr(std::size_t p, std::size_t f) {
  UNETRConfig c;
  c.vit.patch_size = p;
  c.feature_size = f;
  return c;
}

UNETRConfig tiny_unetr(std::size_t p = 4, std::size_t f = 8) {
  UNETRConfig c;
  c.vit.patch_size = p;
  c.vit.embed_dim = 16;
  c.vit.mlp_dim = 32;
  c.vit.num_layers = 3;
  c.vit.num_heads = 2;
  c.feature_size = f;
  return c;
}

std::size_t trainable(const UNETRConfig& c) {
  Unetr<float> m(c);
  return nn::count_parameters<float>(m);
}

Tensor<float> random_images(std::size_t B, std::uint64_t seed) {
  CounterRng rng(seed, 6);
  Tensor<float> t(Shape{B, 16, 64, 64});
  for (auto& v : t.storage()) v = float(rng.uniform());
  return t;
}

TEST(ParameterCount, MatchesReportedSizes) {
  const double f64 = double(trainable(base_unetr(2, 64)));
  const double f128 = double(trainable(base_unetr(2, 128)));
  EXPECT_NEAR(f64 / 3.1e6, 1.0, 0.15) << f64;
  EXPECT_NEAR(f128 / 3.7e6, 1.0, 0.15) << f128;
}

TEST(ParameterCount, GridSpansThreeToTwoHundredMillion) {
  std::size_t lo = SIZE_MAX, hi = 0;
  for (std::size_t p : {2, 4, 8}) {
    for (std::size_t f : {16, 32, 64, 128, 256, 512}) {
      const auto n = trainable(base_unetr(p, f));
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
  }
  EXPECT_GE(double(lo), 3e6 / 2);
  EXPECT_LE(double(lo), 3e6 * 2);
  EXPECT_GE(double(hi), 200e6 / 2);
  EXPECT_LE(double(hi), 200e6 * 2);
}

TEST(ParameterCount, EncoderSizeByHand) {
  // Linear patch embedding, class token, 6 pre-norm blocks, final norm.
  const std::size_t E = 192, M = 768, D = 16 * 2 * 2;
  const std::size_t block = 2 * 2 * E + 4 * (E * E + E) + (E * M + M) + (M * E + E);
  const std::size_t expected = (D * E + E) + E + 6 * block + 2 * E;
  VitEncoder<float> enc(base_unetr(2, 16).vit);
  EXPECT_EQ(nn::count_parameters<float>(enc), expected);
}

TEST(Taps, DerivedFromPatchSize) {
  EXPECT_EQ(base_unetr(2, 16).taps(), (std::vector<std::size_t>{6}));
  EXPECT_EQ(base_unetr(4, 16).taps(), (std::vector<std::size_t>{3, 6}));
  EXPECT_EQ(base_unetr(8, 16).taps(), (std::vector<std::size_t>{2, 4, 6}));
  UNETRConfig c = base_unetr(8, 16);
  c.taps_override = {3, 5, 6};
  EXPECT_NO_THROW(c.validate());
  c.taps_override = {3, 6};
  EXPECT_THROW(c.validate(), ConfigError);
  c.taps_override = {4, 2, 6};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(base_unetr(6, 16).validate(), ConfigError);
}

TEST(Forward, LogitShapesForEveryPatchSize) {
  for (std::size_t p : {2, 4, 8}) {
    Unetr<float> m(tiny_unetr(p));
    nn::initialize<float>(m, 1);
    Tape<float> tape({.grad_enabled = false});
    EXPECT_EQ(m.forward(tape, random_images(2, 1)).shape(), (Shape{2, 9, 64, 64})) << p;
  }
}

TEST(Forward, BatchOrderDoesNotMatter) {
  Unetr<float> m(tiny_unetr());
  nn::initialize<float>(m, 2);
  const auto imgs = random_images(3, 4);
  Tensor<float> swapped(imgs.shape());
  const std::size_t n = 16 * 64 * 64;
  for (std::size_t b = 0; b < 3; ++b) std::copy_n(imgs.ptr() + b * n, n, swapped.ptr() + (2 - b) * n);
  Tape<float> t1({.grad_enabled = false}), t2({.grad_enabled = false});
  const auto a = m.forward(t1, imgs).value(), b = m.forward(t2, swapped).value();
  const std::size_t k = 9 * 64 * 64;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < k; ++i) ASSERT_NEAR(a[s * k + i], b[(2 - s) * k + i], 1e-5);
  }
}

TEST(Forward, BackwardReachesEveryParameter) {
  Unetr<float> m(tiny_unetr(8));
  nn::initialize<float>(m, 3);
  Tape<float> tape;
  SparseLabelMask labels(64, 64, kUnlabeled);
  for (std::size_t i = 0; i < labels.codes.size(); i += 7) labels.codes[i] = std::uint8_t(i % 9);
  tape.backward(sparse_cross_entropy(tape, m.forward(tape, random_images(1, 5)), {labels}));
  m.visit("", [](const std::string& name, Parameter<float>& p) {
    double norm = 0;
    for (float g : p.grad.storage()) norm += double(g) * g;
    EXPECT_GT(norm, 0.0) << name;
  });
}

TEST(Freezing, EncoderUntouchedByOptimizer) {
  Unetr<float> m(tiny_unetr());
  nn::initialize<float>(m, 3);
  nn::set_frozen<float>(m.encoder, true);
  Unetr<float> before = m;
  Adam<float> opt({});
  SparseLabelMask labels(64, 64, 0);
  Tape<float> tape;
  tape.backward(sparse_cross_entropy(tape, m.forward(tape, random_images(1, 6)), {labels}));
  opt.step(nn::parameters<float>(m), 1e-2);
  auto pb = nn::parameters<float>(before), pa = nn::parameters<float>(m);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name.starts_with("encoder.")) {
      EXPECT_EQ(pa[i].param->value, pb[i].param->value) << pa[i].name;
    } else {
      EXPECT_NE(pa[i].param->value, pb[i].param->value) << pa[i].name;
    }
  }
}

TEST(SparseLoss, UnlabeledLogitsDoNotMatter) {
  CounterRng rng(4, 4);
  Tensor<double> logits(Shape{2, 9, 8, 8});
  for (auto& v : logits.storage()) v = rng.normal();
  std::vector<SparseLabelMask> labels(2, SparseLabelMask(8, 8, kUnlabeled));
  for (auto& l : labels) {
    for (std::size_t i = 0; i < 64; ++i) {
      if (rng.bernoulli(0.3)) l.codes[i] = std::uint8_t(rng.below(9));
    }
  }
  Tape<double> tape;
  const double base = sparse_cross_entropy(tape, tape.constant(logits), labels).value()[0];
  Tensor<double> perturbed = logits;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 9; ++k) {
      for (std::size_t i = 0; i < 64; ++i) {
        if (labels[b].codes[i] == kUnlabeled) perturbed[(b * 9 + k) * 64 + i] += 100.0 * rng.normal();
      }
    }
  }
  const double after = sparse_cross_entropy(tape, tape.constant(perturbed), labels).value()[0];
  EXPECT_EQ(base, after);
}

TEST(SparseLoss, UniformLogitsGiveLogNine) {
  Tensor<double> logits(Shape{1, 9, 4, 4}, 0.25);
  SparseLabelMask l(4, 4, kUnlabeled);
  l.codes[3] = 2;
  l.codes[9] = 8;
  Tape<double> tape;
  EXPECT_NEAR(sparse_cross_entropy(tape, tape.constant(logits), {l}).value()[0], std::log(9.0), 1e-10);
}

TEST(SparseLoss, MatchesHandComputedCrossEntropy) {
  CounterRng rng(8, 8);
  Tensor<double> logits(Shape{1, 9, 2, 2});
  for (auto& v : logits.storage()) v = rng.normal();
  SparseLabelMask l(2, 2, kUnlabeled);
  l.codes[0] = 4;
  l.codes[3] = 0;
  double expected = 0;
  for (std::size_t px : {0, 3}) {
    double z = 0;
    for (std::size_t k = 0; k < 9; ++k) z += std::exp(logits[k * 4 + px]);
    expected += -(logits[l.codes[px] * 4 + px] - std::log(z));
  }
  Tape<double> tape;
  EXPECT_NEAR(sparse_cross_entropy(tape, tape.constant(logits), {l}).value()[0], expected / 2, 1e-12);
}

TEST(SparseLoss, RejectsMapsWithoutLabels) {
  Tape<double> tape;
  Tensor<double> logits(Shape{1, 9, 2, 2});
  EXPECT_THROW(sparse_cross_entropy(tape, tape.constant(logits), {SparseLabelMask(2, 2, kUnlabeled)}), std::invalid_argument);
  EXPECT_THROW(sparse_cross_entropy(tape, tape.constant(logits), {SparseLabelMask(3, 2, 0)}), ShapeError);
}

TEST(Transfer, PretrainedEncoderIsCopiedAndMismatchRejected) {
  MAEConfig mc;
  mc.vit = tiny_unetr().vit;
  MaskedAutoencoder<float> mae(mc);
  nn::initialize<float>(mae, 10);
  Checkpoint c;
  RunConfig rc;
  rc.pretrain.mae = mc;
  c.config = dump_config(rc);
  store_module<float>(c, mae, "mae");

  Unetr<float> m(tiny_unetr());
  nn::initialize<float>(m, 11);
  load_pretrained_encoder(m, c);
  auto enc = nn::parameters<float>(m.encoder), src = nn::parameters<float>(mae.encoder);
  ASSERT_EQ(enc.size(), src.size());
  for (std::size_t i = 0; i < enc.size(); ++i) EXPECT_EQ(enc[i].param->value, src[i].param->value) << enc[i].name;

  Unetr<float> other(tiny_unetr(8));
  nn::initialize<float>(other, 11);
  Unetr<float> untouched = other;
  EXPECT_THROW(load_pretrained_encoder(other, c), ConfigError);
  auto a = nn::parameters<float>(other);
  auto b = nn::parameters<float>(untouched);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].param->value, b[i].param->value);
}

}  // namespace
