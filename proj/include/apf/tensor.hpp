// Copyright 2026 The APF Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "apf/common.hpp"
#include "apf/rng.hpp"

namespace apf {

/// Dense row-major tensor of rank 0..2, templated on scalar so the same
/// model code runs in float for training and double for gradient checks.
///
/// A tensor with requires_grad=true accumulates into `grad` during
/// Graph::backward; frozen tensors never allocate a grad buffer.
template <typename ScalarT>
class Tensor {
 public:
  using Scalar = ScalarT;
  using Mat =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using ConstMap = Eigen::Map<const Mat>;

  Tensor() = default;

  explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(numel()), Scalar(0));
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<Index> shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor ones(std::vector<Index> shape) {
    return full(std::move(shape), Scalar(1));
  }

  static Tensor scalar(Scalar v) {
    Tensor t{std::vector<Index>{}};
    t.data_[0] = v;
    return t;
  }

  static Tensor from_values(std::vector<Index> shape, std::initializer_list<Scalar> v) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(v.size()) != t.numel())
      throw ShapeError("from_values: element count does not match shape");
    std::copy(v.begin(), v.end(), t.data_.begin());
    return t;
  }

  static Tensor kaiming_uniform(std::vector<Index> shape, Index fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<Scalar>(rng.kaiming_uniform(fan_in));
    return t;
  }

  static Tensor truncated_normal(std::vector<Index> shape, double sigma, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<Scalar>(rng.truncated_normal(sigma));
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }

  Index numel() const {
    Index n = 1;
    for (Index d : shape_) n *= d;
    return n;
  }

  /// Rank 0 is 1x1, rank 1 is a single row, rank 2 is rows x cols.
  Index rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  Index cols() const { return shape_.empty() ? 1 : shape_.back(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& at(Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar at(Index i) const { return data_[static_cast<std::size_t>(i)]; }
  Scalar& at(Index r, Index c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  Scalar at(Index r, Index c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

  Map mat() { return Map(data_.data(), rows(), cols()); }
  ConstMap mat() const { return ConstMap(data_.data(), rows(), cols()); }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    if (!v) grad_.clear();
    return *this;
  }

  bool has_grad() const { return !grad_.empty(); }
  std::vector<Scalar>& grad() { return grad_; }
  const std::vector<Scalar>& grad() const { return grad_; }

  Map grad_mat() {
    ensure_grad();
    return Map(grad_.data(), rows(), cols());
  }

  void ensure_grad() {
    if (!requires_grad_)
      throw InternalError("grad buffer requested on a frozen tensor");
    if (grad_.empty()) grad_.assign(data_.size(), Scalar(0));
  }

  void zero_grad() {
    if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), Scalar(0));
  }

  void clear_grad() { grad_.clear(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Converts to another scalar type (used to lift a float model into the
  /// double gradient-check mode).
  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out.storage()[i] = static_cast<U>(data_[i]);
    out.set_requires_grad(requires_grad_);
    return out;
  }

  static std::string shape_string(const std::vector<Index>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

  std::string shape_string() const { return shape_string(shape_); }

 private:
  void validate_shape() const {
    if (shape_.size() > 2)
      throw ShapeError("tensor rank above 2 is not supported: " + shape_string(shape_));
    for (Index d : shape_)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape_));
  }

  std::vector<Index> shape_;
  std::vector<Scalar> data_;
  std::vector<Scalar> grad_;
  bool requires_grad_ = false;
};

}  // namespace apf
