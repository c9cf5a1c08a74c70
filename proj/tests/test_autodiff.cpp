#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "hemaseg/autodiff/gradcheck.hpp"
#include "hemaseg/nn/layers.hpp"

using namespace hemaseg;

namespace {

Tensor<double> random_tensor(const Shape& s, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = 2.0 * rng.uniform() - 1.0;
  return t;
}

class Catalog : public ::testing::TestWithParam<std::string> {};

TEST_P(Catalog, MatchesCentralDifferences) {
  const GradcheckReport r = gradcheck(GetParam());
  EXPECT_LE(r.max_rel_error, 1e-4) << GetParam();
}

std::vector<std::string> catalog_names() {
  std::vector<std::string> names;
  for (const auto& e : primitive_catalog()) names.push_back(e.name);
  return names;
}

INSTANTIATE_TEST_SUITE_P(Primitives, Catalog, ::testing::ValuesIn(catalog_names()),
                         [](const auto& info) { return info.param; });

TEST(Gradcheck, CatalogCoversRequiredPrimitives) {
  const auto names = catalog_names();
  for (const char* required : {"matmul", "add", "sub", "mul", "reshape", "permute", "transpose", "concat", "gather_rows",
                               "softmax", "layer_norm", "gelu", "relu", "conv2d", "conv_transpose2d", "instance_norm",
                               "mean", "sum", "abs", "log", "exp"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), required), names.end()) << required;
  }
}

TEST(Gradcheck, FlagsCorruptedBackward) {
  CatalogEntry broken{"square_wrong", {{3, 4}}, {}, {}, [](Tape<double>& tape, const std::vector<Var<double>>& in) {
                        Var<double> x = in[0];
                        Tensor<double> y = x.value();
                        for (auto& v : y.storage()) v = v * v;
                        const std::size_t xi = x.id;
                        return tape.record("square_wrong", std::move(y), {x}, [xi](Tape<double>& t, std::size_t self) {
                          const auto& dy = t.grad_buffer(self);
                          const auto& xv = t.value(xi);
                          auto& dx = t.grad_buffer(xi);
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * 3.0 * xv[i];  // should be 2x
                        });
                      }};
  const GradcheckReport r = gradcheck(broken, {}, 3);
  EXPECT_FALSE(r.passed(1e-4));
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(Gradcheck, DefaultsToSixtyFourBitCentralDifferences) {
  // The same primitive checked with its own shapes and an explicit shape list agrees.
  const auto a = gradcheck("matmul");
  const auto b = gradcheck("matmul", {{4, 3}, {3, 2}});
  EXPECT_EQ(a.max_rel_error, b.max_rel_error);
}

TEST(Ops, MatmulMatchesLoops) {
  Tape<double> t;
  const auto a = random_tensor({2, 3, 4}, 1), b = random_tensor({2, 4, 5}, 2);
  const auto c = matmul(t.constant(a), t.constant(b)).value();
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(n * 3 + i) * 4 + k] * b[(n * 4 + k) * 5 + j];
        EXPECT_NEAR(c[(n * 3 + i) * 5 + j], s, 1e-12);
      }
    }
  }
}

TEST(Ops, BroadcastAddOverLeadingDims) {
  Tape<double> t;
  const auto a = random_tensor({2, 3}, 3), b = random_tensor({3}, 4);
  const auto c = add(t.constant(a), t.constant(b)).value();
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(c[i * 3 + j], a[i * 3 + j] + b[j]);
  }
  EXPECT_THROW(add(t.constant(a), t.constant(random_tensor({2}, 5))), ShapeError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Tape<double> t;
  const auto x = random_tensor({4, 7}, 6);
  const auto y = softmax(t.constant(x)).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0, z = 0;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(x[r * 7 + j]);
    for (std::size_t j = 0; j < 7; ++j) {
      s += y[r * 7 + j];
      EXPECT_NEAR(y[r * 7 + j], std::exp(x[r * 7 + j]) / z, 1e-14);
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Ops, GeluIsExactErfForm) {
  Tape<double> t;
  const auto x = random_tensor({16}, 7);
  const auto y = gelu(t.constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(y[i], 0.5 * x[i] * (1.0 + std::erf(x[i] / std::numbers::sqrt2)), 1e-15);
  }
}

TEST(Ops, LayerNormMatchesDefinition) {
  Tape<double> t;
  const auto x = random_tensor({3, 8}, 8), g = random_tensor({8}, 9), b = random_tensor({8}, 10);
  const auto y = layer_norm(t.constant(x), t.constant(g), t.constant(b), 1e-6).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 8; ++j) m += x[r * 8 + j] / 8;
    for (std::size_t j = 0; j < 8; ++j) v += (x[r * 8 + j] - m) * (x[r * 8 + j] - m) / 8;
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(y[r * 8 + j], (x[r * 8 + j] - m) / std::sqrt(v + 1e-6) * g[j] + b[j], 1e-12);
    }
  }
}

TEST(Ops, InstanceNormZeroMeanUnitVariancePerChannel) {
  Tape<double> t;
  const auto y = instance_norm(t.constant(random_tensor({2, 3, 5, 5}, 11)), 0.0).value();
  for (std::size_t bc = 0; bc < 6; ++bc) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 25; ++i) m += y[bc * 25 + i] / 25;
    for (std::size_t i = 0; i < 25; ++i) v += (y[bc * 25 + i] - m) * (y[bc * 25 + i] - m) / 25;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-10);
  }
}

TEST(Ops, Conv2dMatchesDirectSum) {
  Tape<double> t;
  const auto x = random_tensor({2, 3, 5, 6}, 12), w = random_tensor({4, 3, 3, 3}, 13), bias = random_tensor({4}, 14);
  const auto y = conv2d(t.constant(x), t.constant(w), std::optional(t.constant(bias)), {.stride = 1, .pad = 1}).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4, 5, 6}));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t o = 0; o < 4; ++o) {
      for (long i = 0; i < 5; ++i) {
        for (long j = 0; j < 6; ++j) {
          double s = bias[o];
          for (std::size_t c = 0; c < 3; ++c) {
            for (long ki = 0; ki < 3; ++ki) {
              for (long kj = 0; kj < 3; ++kj) {
                const long ii = i + ki - 1, jj = j + kj - 1;
                if (ii < 0 || jj < 0 || ii >= 5 || jj >= 6) continue;
                s += x[((b * 3 + c) * 5 + std::size_t(ii)) * 6 + std::size_t(jj)] * w[((o * 3 + c) * 3 + std::size_t(ki)) * 3 + std::size_t(kj)];
              }
            }
          }
          EXPECT_NEAR(y[((b * 4 + o) * 5 + std::size_t(i)) * 6 + std::size_t(j)], s, 1e-12);
        }
      }
    }
  }
}

TEST(Ops, ConvTransposeDoublesAndScattersKernel) {
  Tape<double> t;
  const auto x = random_tensor({1, 2, 3, 3}, 15), w = random_tensor({2, 3, 2, 2}, 16);
  const auto y = conv_transpose2d(t.constant(x), t.constant(w), std::optional<Var<double>>{}, {.stride = 2, .pad = 0}).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 6, 6}));
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < 2; ++c) s += x[(c * 3 + i / 2) * 3 + j / 2] * w[((c * 3 + o) * 2 + i % 2) * 2 + j % 2];
        EXPECT_NEAR(y[(o * 6 + i) * 6 + j], s, 1e-12);
      }
    }
  }
}

TEST(Tape, SecondBackwardIsAnError) {
  Tape<double> t;
  Var<double> x = t.variable(random_tensor({3}, 17));
  Var<double> loss = sum(mul(x, x));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), std::logic_error);
  t.reset();
  Var<double> y = t.variable(random_tensor({3}, 17));
  EXPECT_NO_THROW(t.backward(sum(y)));
}

TEST(Tape, CheckedModeTrapsNonFinite) {
  Tape<double> t({.grad_enabled = true, .checked = true});
  Tensor<double> v(Shape{2}, -1.0);
  EXPECT_THROW(log(t.variable(v)), NumericError);
  Tape<double> unchecked;
  EXPECT_NO_THROW(log(unchecked.variable(v)));
}

TEST(Tape, GradDisabledRecordsNoGradient) {
  Tape<double> t({.grad_enabled = false});
  Var<double> x = t.variable(random_tensor({3}, 18));
  Var<double> y = exp(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, ParameterGradientsAccumulateAcrossPasses) {
  Parameter<double> p({3}, Init::zeros);
  p.value = random_tensor({3}, 19);
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> t;
    t.backward(sum(scale(t.param(p), 2.0)));
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p.grad[i], 4.0);
  p.zero_grad();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p.grad[i], 0.0);
}

TEST(Tape, FrozenParameterGetsNoGradient) {
  Parameter<double> p({3}, Init::zeros);
  p.value = random_tensor({3}, 20);
  p.frozen = true;
  Tape<double> t;
  Var<double> x = t.variable(random_tensor({3}, 21));
  t.backward(sum(mul(t.param(p), x)));
  EXPECT_TRUE(p.grad.empty());
  EXPECT_NE(x.grad()[0], 0.0);
}

TEST(Tape, UninitializedParameterIsRejected) {
  Parameter<double> p({3}, Init::zeros);
  Tape<double> t;
  EXPECT_THROW(t.param(p), std::logic_error);
}

}  // namespace
