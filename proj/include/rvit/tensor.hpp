#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace rvit {

// Dense row-major tensor with shared storage. Copies are shallow; call
// clone() for a deep copy. Mutation is only valid while the caller knows
// the storage is not shared (freshly created tensors, or parameter tensors
// updated between training steps).
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using EigenMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstEigenMap =
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_ = std::make_shared<std::vector<S>>(numel_of(shape_), S(0));
  }

  Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor from_vector(std::vector<int> shape, std::vector<S> values) {
    if (numel_of(shape) != values.size()) {
      throw std::invalid_argument("tensor shape does not match value count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<S>>(std::move(values));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  size_t numel() const { return data_ ? data_->size() : 0; }

  // 2-D accessors (the dominant case).
  int rows() const {
    assert(rank() == 2);
    return shape_[0];
  }
  int cols() const {
    assert(rank() == 2);
    return shape_[1];
  }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }

  S& at(size_t i) { return (*data_)[i]; }
  const S& at(size_t i) const { return (*data_)[i]; }

  S& at2(int r, int c) { return (*data_)[static_cast<size_t>(r) * shape_[1] + c]; }
  const S& at2(int r, int c) const { return (*data_)[static_cast<size_t>(r) * shape_[1] + c]; }

  EigenMap mat() {
    assert(rank() == 2);
    return EigenMap(data(), shape_[0], shape_[1]);
  }
  ConstEigenMap mat() const {
    assert(rank() == 2);
    return ConstEigenMap(data(), shape_[0], shape_[1]);
  }

  // Maps the flat buffer as a single row vector regardless of rank.
  EigenMap flat() { return EigenMap(data(), 1, static_cast<int>(numel())); }
  ConstEigenMap flat() const { return ConstEigenMap(data(), 1, static_cast<int>(numel())); }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<S>>(*data_);
    return t;
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) {
      throw std::invalid_argument("reshape changes element count");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(numel());
    for (size_t i = 0; i < numel(); ++i) out[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>::from_vector(shape_, std::move(out));
  }

  void fill(S value) { std::fill(data_->begin(), data_->end(), value); }

  void zero() { fill(S(0)); }

  void add_(const Tensor& other) {
    assert(numel() == other.numel());
    S* a = data();
    const S* b = other.data();
    for (size_t i = 0; i < numel(); ++i) a[i] += b[i];
  }

  void scale_(S c) {
    S* a = data();
    for (size_t i = 0; i < numel(); ++i) a[i] *= c;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<S>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace rvit
