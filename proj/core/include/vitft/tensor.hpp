// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <algorithm>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace vitft {

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Storage is 64-byte aligned so vectorized kernels take the same code path
// (and hence the same reduction order) on every run.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major tensor with an optional gradient accumulator.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel_of(shape_)), fill) {}
  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape)) {
    if (values.size() != data_.size()) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape_));
    }
    std::copy(values.begin(), values.end(), data_.begin());
  }
  Tensor(Shape shape, std::span<const T> values) : Tensor(std::move(shape)) {
    if (values.size() != data_.size()) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape_));
    }
    std::copy(values.begin(), values.end(), data_.begin());
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const {
    return shape_.at(static_cast<std::size_t>(axis < 0 ? axis + rank() : axis));
  }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Changes the shape, keeping capacity; contents are unspecified afterwards.
  void resize(const Shape& shape) {
    if (shape != shape_) {
      shape_ = shape;
      data_.resize(static_cast<std::size_t>(numel_of(shape_)));
    }
  }
  /// Same element count, new extents.
  void reshape(Shape shape) {
    if (numel_of(shape) != numel_of(shape_)) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    shape_ = std::move(shape);
    if (has_grad_) grad_shape_fixup();
  }
  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  bool has_grad() const { return has_grad_; }
  /// Gradient buffer; allocated (zeroed) on first access.
  std::span<T> grad() {
    if (!has_grad_) {
      grad_.assign(data_.size(), T{0});
      has_grad_ = true;
    }
    return grad_;
  }
  std::span<const T> grad() const {
    if (!has_grad_) throw std::logic_error("Tensor::grad: no gradient allocated");
    return grad_;
  }
  void zero_grad() {
    if (has_grad_) std::fill(grad_.begin(), grad_.end(), T{0});
  }
  void clear_grad() {
    grad_.clear();
    has_grad_ = false;
  }

  /// Swaps values (not gradients) with another tensor of identical shape.
  void swap_values(Tensor& other) {
    if (other.shape_ != shape_) {
      throw ShapeError("swap_values " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    }
    data_.swap(other.data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    out.set_requires_grad(requires_grad_);
    return out;
  }

  /// Bitwise comparison of shape and values.
  bool bits_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0;
  }

 private:
  void grad_shape_fixup() { grad_.resize(data_.size()); }

  Shape shape_;
  AlignedVector<T> data_;
  AlignedVector<T> grad_;
  bool requires_grad_ = false;
  bool has_grad_ = false;
};

}  // namespace vitft
