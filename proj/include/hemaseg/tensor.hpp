#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hemaseg {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a configuration violates an invariant. The message names the field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by checked tapes when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

[[noreturn]] inline void throw_shape_mismatch(const std::string& op, const Shape& a,
                                              const Shape& b) {
  throw ShapeError(op + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

/// Dense row-major array. Value semantics; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }

  [[nodiscard]] std::span<T> data() noexcept { return data_; }
  [[nodiscard]] std::span<const T> data() const noexcept { return data_; }
  [[nodiscard]] T* ptr() noexcept { return data_.data(); }
  [[nodiscard]] const T* ptr() const noexcept { return data_.data(); }
  [[nodiscard]] std::vector<T>& storage() noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Same data, new shape. Element count must be preserved.
  [[nodiscard]] Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) throw_shape_mismatch("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

}  // namespace hemaseg
