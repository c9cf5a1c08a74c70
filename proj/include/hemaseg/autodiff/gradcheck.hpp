#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hemaseg/autodiff/ops.hpp"
#include "hemaseg/rng.hpp"

namespace hemaseg {

/// How gradcheck samples an input tensor.
enum class InputDomain {
  symmetric,  // uniform in [-1, 1]
  away_from_zero,  // |x| in [0.2, 1], random sign (keeps kinks out of the stencil)
  positive,  // uniform in [0.5, 2]
};

/// One primitive as seen by the gradient checker.
struct CatalogEntry {
  std::string name;
  std::vector<Shape> default_shapes;
  std::vector<InputDomain> domains;  // per input; missing entries default to symmetric
  /// Completes user-supplied shapes with any auxiliary inputs (gains, biases).
  std::function<std::vector<Shape>(std::vector<Shape>)> complete;
  std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> apply;
};

struct GradcheckReport {
  std::string op;
  std::vector<double> input_max_rel_error;
  double max_rel_error = 0.0;
  [[nodiscard]] bool passed(double tol = 1e-4) const { return max_rel_error <= tol; }
};

inline std::vector<CatalogEntry> primitive_catalog() {
  using V = Var<double>;
  using D = InputDomain;
  std::vector<CatalogEntry> c;
  c.push_back({"matmul", {{4, 3}, {3, 2}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return matmul(in[0], in[1]); }});
  c.push_back({"matmul_batched", {{2, 3, 4}, {2, 4, 3}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return matmul(in[0], in[1]); }});
  c.push_back({"add", {{2, 3, 4}, {3, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return add(in[0], in[1]); }});
  c.push_back({"sub", {{3, 4}, {2, 3, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return sub(in[0], in[1]); }});
  c.push_back({"mul", {{2, 3, 4}, {4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return mul(in[0], in[1]); }});
  c.push_back({"scale", {{3, 5}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return scale(in[0], -1.75); }});
  c.push_back({"reshape", {{2, 6}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) {
                 const auto n = in[0].value().size();
                 return reshape(in[0], Shape{n / 3, 3});
               }});
  c.push_back({"permute", {{2, 3, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) {
                 return permute(in[0], {2, 0, 1});
               }});
  c.push_back({"transpose", {{2, 3, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return transpose(in[0]); }});
  c.push_back({"concat", {{2, 3, 2}, {2, 1, 2}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) {
                 return concat<double>({in[0], in[1]}, 1);
               }});
  c.push_back({"gather_rows", {{5, 3}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) {
                 const std::size_t r = in[0].shape()[0];
                 return gather_rows(in[0], {r - 1, 0, r / 2, 0});
               }});
  c.push_back({"softmax", {{3, 5}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return softmax(in[0]); }});
  c.push_back({"log_softmax", {{3, 5}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return log_softmax(in[0]); }});
  c.push_back({"layer_norm", {{2, 8}}, {}, [](std::vector<Shape> s) {
                 if (s.size() == 1) {
                   s.push_back({s[0].back()});
                   s.push_back({s[0].back()});
                 }
                 return s;
               },
               [](Tape<double>&, const std::vector<V>& in) { return layer_norm(in[0], in[1], in[2], 1e-6); }});
  c.push_back({"instance_norm", {{2, 3, 4, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return instance_norm(in[0]); }});
  c.push_back({"gelu", {{4, 5}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return gelu(in[0]); }});
  c.push_back({"relu", {{4, 5}}, {D::away_from_zero}, {}, [](Tape<double>&, const std::vector<V>& in) { return relu(in[0]); }});
  c.push_back({"abs", {{4, 5}}, {D::away_from_zero}, {}, [](Tape<double>&, const std::vector<V>& in) { return abs(in[0]); }});
  c.push_back({"log", {{4, 5}}, {D::positive}, {}, [](Tape<double>&, const std::vector<V>& in) { return log(in[0]); }});
  c.push_back({"exp", {{4, 5}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return exp(in[0]); }});
  c.push_back({"sum", {{3, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return sum(in[0]); }});
  c.push_back({"mean", {{3, 4}}, {}, {}, [](Tape<double>&, const std::vector<V>& in) { return mean(in[0]); }});
  c.push_back({"conv2d", {{1, 4, 6, 6}, {3, 4, 3, 3}}, {}, [](std::vector<Shape> s) {
                 if (s.size() == 2) s.push_back({s[1][0]});
                 return s;
               },
               [](Tape<double>&, const std::vector<V>& in) {
                 return conv2d(in[0], in[1], std::optional<V>(in[2]), {.stride = 1, .pad = 1});
               }});
  c.push_back({"conv2d_strided", {{2, 3, 7, 7}, {2, 3, 3, 3}}, {}, [](std::vector<Shape> s) {
                 if (s.size() == 2) s.push_back({s[1][0]});
                 return s;
               },
               [](Tape<double>&, const std::vector<V>& in) {
                 return conv2d(in[0], in[1], std::optional<V>(in[2]), {.stride = 2, .pad = 1});
               }});
  c.push_back({"conv_transpose2d", {{2, 3, 3, 3}, {3, 2, 2, 2}}, {}, [](std::vector<Shape> s) {
                 if (s.size() == 2) s.push_back({s[1][1]});
                 return s;
               },
               [](Tape<double>&, const std::vector<V>& in) {
                 return conv_transpose2d(in[0], in[1], std::optional<V>(in[2]), {.stride = 2, .pad = 0});
               }});
  return c;
}

inline const CatalogEntry& find_primitive(const std::vector<CatalogEntry>& catalog, const std::string& name) {
  for (const auto& e : catalog) {
    if (e.name == name) return e;
  }
  throw std::invalid_argument("gradcheck: '" + name + "' is not in the primitive catalog");
}

namespace detail {

inline Tensor<double> sample_input(const Shape& shape, InputDomain domain, CounterRng& rng) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) {
    switch (domain) {
      case InputDomain::symmetric:
        v = 2.0 * rng.uniform() - 1.0;
        break;
      case InputDomain::away_from_zero:
        v = (0.2 + 0.8 * rng.uniform()) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        break;
      case InputDomain::positive:
        v = 0.5 + 1.5 * rng.uniform();
        break;
    }
  }
  return t;
}

}  // namespace detail

/// Compares analytic gradients of sum(op(inputs) ⊙ R), R a fixed random
/// projection, with central differences. Error per input is the normwise
/// relative error max|a - n| / max(max|a|, max|n|).
inline GradcheckReport gradcheck(const CatalogEntry& entry, std::vector<Shape> shapes,
                                 std::uint64_t seed, double step = 1e-5) {
  if (shapes.empty()) shapes = entry.default_shapes;
  if (entry.complete) shapes = entry.complete(std::move(shapes));
  CounterRng rng(seed, stream_id("gradcheck"));
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto dom = i < entry.domains.size() ? entry.domains[i] : InputDomain::symmetric;
    inputs.push_back(detail::sample_input(shapes[i], dom, rng));
  }

  Tensor<double> projection;
  auto evaluate = [&](bool with_grad, std::vector<Tensor<double>>* grads) {
    Tape<double> tape({.grad_enabled = with_grad, .checked = true});
    std::vector<Var<double>> vars;
    for (const auto& in : inputs) vars.push_back(tape.variable(in));
    Var<double> out = entry.apply(tape, vars);
    if (projection.empty()) {
      CounterRng prng(seed, stream_id("gradcheck/projection"));
      projection = detail::sample_input(out.shape(), InputDomain::symmetric, prng);
    }
    Var<double> loss = sum(mul(out, tape.constant(projection)));
    const double value = loss.value()[0];
    if (with_grad) {
      tape.backward(loss);
      for (auto& v : vars) grads->push_back(v.grad());
    }
    return value;
  };

  std::vector<Tensor<double>> analytic;
  evaluate(true, &analytic);

  GradcheckReport report{entry.name, {}, 0.0};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = inputs[i][j];
      inputs[i][j] = x0 + step;
      const double fp = evaluate(false, nullptr);
      inputs[i][j] = x0 - step;
      const double fm = evaluate(false, nullptr);
      inputs[i][j] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[i][j];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    const double err = scale > 0.0 ? max_diff / scale : max_diff;
    report.input_max_rel_error.push_back(err);
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

inline GradcheckReport gradcheck(const std::string& name, std::vector<Shape> shapes = {},
                                 std::uint64_t seed = 1) {
  static const auto catalog = primitive_catalog();
  return gradcheck(find_primitive(catalog, name), std::move(shapes), seed);
}

}  // namespace hemaseg
