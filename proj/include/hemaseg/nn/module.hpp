#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hemaseg/autodiff/tape.hpp"
#include "hemaseg/rng.hpp"

namespace hemaseg::nn {

// A module is any type exposing
//
//   template <typename F> void visit(const std::string& prefix, F&& f);
//
// which calls f(name, Parameter<T>&) for each owned parameter in a fixed
// order. Names are dotted paths ("encoder.blocks.0.attn.query.weight"); they
// key checkpoints and initialization substreams.

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <typename T, typename M>
std::vector<NamedParameter<T>> parameters(M& module, const std::string& prefix = "") {
  std::vector<NamedParameter<T>> out;
  module.visit(prefix, [&](const std::string& name, Parameter<T>& p) { out.push_back({name, &p}); });
  return out;
}

/// Counts elements of all parameters, or only the non-frozen ones.
template <typename T, typename M>
std::size_t count_parameters(M& module, bool trainable_only = true) {
  std::size_t n = 0;
  module.visit("", [&](const std::string&, Parameter<T>& p) {
    if (!trainable_only || !p.frozen) n += p.size();
  });
  return n;
}

/// Draws a parameter's initial value from the substream keyed by its name,
/// so the result does not depend on construction or visiting order.
template <typename T>
void initialize_parameter(const std::string& name, Parameter<T>& p, std::uint64_t seed) {
  CounterRng rng = CounterRng(seed, stream_id("init")).fork(stream_id(name));
  p.value = Tensor<T>(p.shape);
  switch (p.init) {
    case Init::zeros:
      break;
    case Init::ones:
      p.value.fill(T(1));
      break;
    case Init::trunc_normal:
      for (auto& v : p.value.data()) v = static_cast<T>(rng.truncated_normal(p.init_scale));
      break;
    case Init::fan_in_uniform: {
      const double bound = 1.0 / std::sqrt(p.init_scale);
      for (auto& v : p.value.data()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      break;
    }
    case Init::he_uniform: {
      const double bound = std::sqrt(6.0 / p.init_scale);
      for (auto& v : p.value.data()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      break;
    }
  }
  p.grad = Tensor<T>();
}

template <typename T, typename M>
void initialize(M& module, std::uint64_t seed, const std::string& prefix = "") {
  module.visit(prefix, [&](const std::string& name, Parameter<T>& p) { initialize_parameter(name, p, seed); });
}

template <typename T, typename M>
void zero_grad(M& module) {
  module.visit("", [](const std::string&, Parameter<T>& p) { p.zero_grad(); });
}

template <typename T, typename M>
void set_frozen(M& module, bool frozen) {
  module.visit("", [frozen](const std::string&, Parameter<T>& p) { p.frozen = frozen; });
}

}  // namespace hemaseg::nn
