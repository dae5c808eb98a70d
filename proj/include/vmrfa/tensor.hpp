#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "vmrfa/errors.hpp"
#include "vmrfa/rng.hpp"

namespace vmrfa {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
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

// Dense row-major float32 array. The universal value carrier: feature maps,
// feature vectors, parameters, masks and images all live in one of these.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
      fail<DimensionError>("tensor data length ", data_.size(),
                           " does not match shape ", shape_str(shape_));
    }
  }

  static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Row-major multi-index access, mainly for tests and small code paths.
  template <typename... Ix>
  float& at(Ix... ix) {
    return data_[flat_index({static_cast<int>(ix)...})];
  }
  template <typename... Ix>
  float at(Ix... ix) const {
    return data_[flat_index({static_cast<int>(ix)...})];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  void fill_normal(Rng& rng, float mean, float stddev) {
    for (auto& v : data_) v = rng.normal_f(mean, stddev);
  }

  void fill_uniform(Rng& rng, float lo, float hi) {
    for (auto& v : data_) v = static_cast<float>(rng.uniform(lo, hi));
  }

  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
      fail<DimensionError>("cannot reshape ", shape_str(shape_), " to ",
                           shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
  }

  bool requires_grad = false;

 private:
  std::size_t flat_index(std::initializer_list<int> ix) const {
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (int i : ix) {
      flat = flat * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return flat;
  }

  void validate_shape() const {
    for (int d : shape_) {
      if (d <= 0) {
        fail<DimensionError>("non-positive dimension in shape ", shape_str(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    fail<DimensionError>(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape()));
  }
}

}  // namespace vmrfa
