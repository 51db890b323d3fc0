// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdmask {

/// Dense row-major tensor with value semantics. Rank is dynamic; shapes are
/// small vectors of ints. This is the storage type underneath autograd
/// variables and the only array type the toolkit uses.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), T(0));
  }

  Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<size_t>(count(shape_)) != data_.size())
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }

  T& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  const T& at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  T& at(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// Returns a tensor with the same data and a new shape (element count must
  /// match). Data is copied; tensors never alias.
  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != numel())
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void add_(const Tensor& o) {
    assert(same_shape(o));
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace cdmask
