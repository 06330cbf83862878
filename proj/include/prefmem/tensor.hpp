// Copyright 2026 The prefmem Authors.
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

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prefmem {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

/// Row-major boolean matrix; `true` marks an allowed (row attends column) pair.
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // pushes this->grad into parents

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

/// Dense 2-D tensor taking part in reverse-mode differentiation.
///
/// A tensor is a shared handle: copies alias the same value and gradient.
/// Vectors are stored as 1×n rows. Values never change after creation except
/// through `mutable_value()`, which only the optimizer and test code use.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using MatrixType = Matrix<Scalar>;

  Tensor() = default;
  explicit Tensor(MatrixType value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(Scalar v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  std::string shape_string() const;

  const MatrixType& value() const { return node_->value; }
  MatrixType& mutable_value() { return node_->value; }
  const MatrixType& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  Scalar item() const;

  void zero_grad() { node_->grad.resize(0, 0); }

  /// Same value, cut off from the graph.
  Tensor detach() const;

  /// Populates `grad()` of every reachable tensor that requires grad.
  /// The tensor must be 1×1.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Block of rows in a packed matrix that attend among themselves under `mask`.
struct AttentionBlock {
  Index offset = 0;
  std::shared_ptr<const BoolMatrix> mask;
  Index length() const { return mask->rows(); }
};

// Elementwise and linear ops.
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> negate(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> cwise_product(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s);
/// a + row, with the 1×n `row` broadcast over every row of `a`.
template <typename Scalar> Tensor<Scalar> add_row(const Tensor<Scalar>& a, const Tensor<Scalar>& row);
template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// a · bᵀ without materializing the transpose.
template <typename Scalar> Tensor<Scalar> matmul_transposed(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> transpose(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index start, Index count);
template <typename Scalar> Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Index start, Index count);
template <typename Scalar> Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts);
template <typename Scalar> Tensor<Scalar> concat_cols(std::span<const Tensor<Scalar>> parts);
/// Row r of the result is table row index[r], or zeros when index[r] < 0.
template <typename Scalar> Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const Index> index);
template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a);

// Nonlinear ops.
template <typename Scalar> Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a);
/// tanh approximation.
template <typename Scalar> Tensor<Scalar> gelu(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& a);
/// Per-row normalization with population variance, then `gamma ⊙ x̂ + beta`.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5));
/// Mean over rows of -log softmax(logits)[target].
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const Index> targets);
/// Per-element mean squared difference.
template <typename Scalar> Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Multi-head scaled dot-product attention over packed blocks.
///
/// `q`, `k`, `v` are N×d with N the total packed length; each block attends only
/// within itself according to its mask. Masked scores are −∞ before softmax.
/// When `probs` is non-null the softmax matrices are appended to it, block-major
/// then head-minor.
template <typename Scalar>
Tensor<Scalar> attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                         std::span<const AttentionBlock> blocks, int n_heads,
                         std::vector<Matrix<Scalar>>* probs = nullptr);

template <typename Scalar> Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar> Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar> Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return negate(a); }
template <typename Scalar> Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return scale(a, s); }

}  // namespace prefmem
