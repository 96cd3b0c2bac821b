#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fvit/core/errors.hpp"

namespace fvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of T with shape metadata.
///
/// A default-constructed tensor is "undefined": it has an empty shape and no
/// storage, and is used for absent optional operands (e.g. a conv without
/// bias) and not-yet-allocated gradients. Every defined tensor satisfies
/// numel() == product(shape) with all dimensions >= 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return !shape_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }

  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NCHW accessors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == 0) {
        throw DimensionError("axis " + std::to_string(i) + " of shape " + shape_str(shape) +
                             " has size 0");
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace fvit
