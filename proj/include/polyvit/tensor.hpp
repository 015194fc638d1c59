#pragma once

// Dense row-major tensor over float or double. Data is held behind a
// shared_ptr<const ...>: tensors are immutable values, copies alias storage,
// and every operation allocates a fresh buffer. Optimizer steps therefore
// replace tensors instead of mutating them, which is what makes parameter
// sharing observable (two views of one parameter compare equal by pointer).

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "polyvit/rng.hpp"

namespace polyvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(std::move(values))),
        requires_grad_(requires_grad) {
    if (data_->size() != shape_numel(shape_))
      throw std::invalid_argument("tensor data size " +
                                  std::to_string(data_->size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) {
    std::vector<T> v(shape_numel(shape), T{0});
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor full(Shape shape, T value) {
    std::vector<T> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  static Tensor normal(Shape shape, Rng& rng, T mean, T stddev) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
    return Tensor(std::move(shape), std::move(v));
  }

  // LeCun normal: stddev 1/sqrt(fan_in), the row length of a weight matrix
  // applied as x . W^T.
  static Tensor lecun_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    return normal(std::move(shape), rng, T{0},
                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in))));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const std::vector<T>& values() const { return *data_; }
  const T* begin() const { return data_->data(); }
  const T* end() const { return data_->data() + data_->size(); }

  // Identity of the underlying buffer; shared parameters alias it.
  const void* data_id() const { return static_cast<const void*>(data_.get()); }

  bool requires_grad() const { return requires_grad_; }
  Tensor with_requires_grad(bool flag) const {
    Tensor t = *this;
    t.requires_grad_ = flag;
    return t;
  }

  T operator[](std::size_t i) const { return (*data_)[i]; }
  T at(std::size_t r, std::size_t c) const {
    return (*data_)[r * shape_.back() + c];
  }

  std::size_t rows() const {
    return rank() == 1 ? 1 : numel() / shape_.back();
  }
  std::size_t cols() const { return shape_.back(); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  bool requires_grad_ = false;
};

template <typename T>
bool same_values(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel())
    throw std::invalid_argument("max_abs_diff on mismatched sizes");
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace polyvit
