#pragma once

#include <optional>
#include <string>

#include "hemaseg/autodiff/ops.hpp"
#include "hemaseg/nn/module.hpp"

namespace hemaseg::nn {

/// y = x·W + b over the last axis. W is stored [in, out].
template <typename T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, double std = 0.02)
      : weight({in, out}, Init::trunc_normal, std), bias({out}, Init::zeros) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join(prefix, "weight"), weight);
    f(join(prefix, "bias"), bias);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    const Shape& s = x.shape();
    const std::size_t in = weight.shape[0];
    if (s.empty() || s.back() != in) throw_shape_mismatch("linear", s, weight.shape);
    Var<T> flat = s.size() == 2 ? x : reshape(x, Shape{x.value().size() / in, in});
    Var<T> y = add(matmul(flat, tape.param(weight)), tape.param(bias));
    if (s.size() == 2) return y;
    Shape out = s;
    out.back() = weight.shape[1];
    return reshape(y, out);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gain;
  Parameter<T> shift;
  double eps = 1e-6;

  LayerNorm() = default;
  LayerNorm(std::size_t dim, double eps_)
      : gain({dim}, Init::ones), shift({dim}, Init::zeros), eps(eps_) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join(prefix, "weight"), gain);
    f(join(prefix, "bias"), shift);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    return layer_norm(x, tape.param(gain), tape.param(shift), eps);
  }
};

/// Square-kernel convolution. He-uniform weights, fan-in uniform bias.
template <typename T>
struct Conv2d {
  Parameter<T> weight;
  std::optional<Parameter<T>> bias;
  Conv2dGeometry geometry;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dGeometry geo, bool with_bias)
      : weight({out, in, kernel, kernel}, Init::he_uniform, double(in * kernel * kernel)),
        geometry(geo) {
    if (with_bias) bias.emplace(Shape{out}, Init::fan_in_uniform, double(in * kernel * kernel));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join(prefix, "weight"), weight);
    if (bias) f(join(prefix, "bias"), *bias);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    std::optional<Var<T>> b;
    if (bias) b = tape.param(*bias);
    return conv2d(x, tape.param(weight), b, geometry);
  }
};

/// Kernel-2 stride-2 transposed convolution: doubles the spatial size.
template <typename T>
struct UpConv2d {
  Parameter<T> weight;
  Parameter<T> bias;

  UpConv2d() = default;
  UpConv2d(std::size_t in, std::size_t out)
      : weight({in, out, 2, 2}, Init::he_uniform, double(out * 4)),
        bias({out}, Init::fan_in_uniform, double(out * 4)) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join(prefix, "weight"), weight);
    f(join(prefix, "bias"), bias);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) {
    return conv_transpose2d(x, tape.param(weight), std::optional<Var<T>>(tape.param(bias)),
                            {.stride = 2, .pad = 0});
  }
};

}  // namespace hemaseg::nn
