#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hemaseg/tensor.hpp"

namespace hemaseg {

/// How a parameter is filled by Module initialization.
enum class Init { zeros, ones, trunc_normal, fan_in_uniform, he_uniform };

/// A trainable tensor owned by a model. The value is allocated lazily by
/// initialization so that very large configurations can be inspected
/// (shape, parameter count) without touching memory.
template <typename T>
struct Parameter {
  Shape shape;
  Init init = Init::zeros;
  double init_scale = 0.0;  // std for trunc_normal, fan-in for the uniform kinds
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(Shape s, Init kind, double scale = 0.0)
      : shape(std::move(s)), init(kind), init_scale(scale) {}

  [[nodiscard]] std::size_t size() const { return numel(shape); }
  [[nodiscard]] bool materialized() const { return !value.empty(); }

  void zero_grad() {
    if (!grad.empty()) grad.fill(T(0));
  }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Tensor<T>& value() const { return tape->value(*this); }
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] const Tensor<T>& grad() const { return tape->grad(*this); }
  [[nodiscard]] bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so every node's inputs have smaller ids; backward walks ids in
/// reverse and visits each node once.
///
/// A tape supports a single backward pass; call reset() before reuse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Options {
    bool grad_enabled = true;
    bool checked = false;  // trap NaN/Inf at every recorded op
  };

  Tape() = default;
  explicit Tape(Options opts) : opts_(opts) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool grad_enabled() const noexcept { return opts_.grad_enabled; }
  [[nodiscard]] bool checked() const noexcept { return opts_.checked; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, "constant"); }

  /// Leaf whose gradient is collected by backward().
  Var<T> variable(Tensor<T> value) {
    return push(std::move(value), opts_.grad_enabled, "variable");
  }

  /// Leaf bound to a model parameter. The tensor is referenced, not copied;
  /// repeated calls for the same parameter return the same node.
  Var<T> param(Parameter<T>& p) {
    if (!p.materialized()) {
      throw std::logic_error("Tape::param: parameter is not initialized");
    }
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.external = &p.value;
    n.requires_grad = opts_.grad_enabled && !p.frozen;
    n.param = &p;
    n.op = "param";
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    param_nodes_.emplace(&p, id);
    return {this, id};
  }

  [[nodiscard]] const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).val(); }
  [[nodiscard]] bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulated at `v` by the last backward pass (zeros if none reached it).
  [[nodiscard]] const Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.val().shape());
    return n.grad;
  }

  /// Mutable gradient buffer, allocated as zeros on first use. For op backward functions.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.val().shape());
    return n.grad;
  }
  [[nodiscard]] bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] const Tensor<T>& value(std::size_t id) const { return nodes_[id].val(); }

  /// Records the output of a primitive. `fn` is dropped when no input needs a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return record_if(op, std::move(value), needs, std::move(fn));
  }

  Var<T> record_if(const char* op, Tensor<T> value, bool needs_grad, BackwardFn fn) {
    if (opts_.checked) check_finite(op, value);
    Var<T> out = push(std::move(value), needs_grad && opts_.grad_enabled, op);
    if (nodes_[out.id].requires_grad) nodes_[out.id].backward = std::move(fn);
    return out;
  }

  /// Reverse pass from a scalar loss. Parameter gradients are accumulated
  /// into Parameter::grad. Errors on a second call without reset().
  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss is on another tape");
    if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
    if (backward_done_) {
      throw std::logic_error("backward: already called on this tape; call reset() first");
    }
    const Tensor<T>& lv = nodes_.at(loss.id).val();
    if (lv.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
    }
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        Parameter<T>& p = *n.param;
        if (p.grad.empty()) p.grad = Tensor<T>(p.shape);
        auto dst = p.grad.data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    const char* op = "";
    [[nodiscard]] const Tensor<T>& val() const { return external ? *external : own; }
  };

  Var<T> push(Tensor<T> value, bool requires_grad, const char* op) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  static void check_finite(const char* op, const Tensor<T>& t) {
    for (const T& x : t.data()) {
      if (!std::isfinite(x)) {
        throw NumericError(std::string("non-finite value produced by ") + op);
      }
    }
  }

  Options opts_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool backward_done_ = false;
};

}  // namespace hemaseg
