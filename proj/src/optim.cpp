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

#include "prefmem/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace prefmem {

template <typename Scalar>
void adamw_update(Matrix<Scalar>& param, const Matrix<Scalar>& grad, Matrix<Scalar>& first, Matrix<Scalar>& second,
                  const AdamWOptions& opts, double weight_decay, std::int64_t step) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) {
    throw ShapeError("adamw_update: gradient shape does not match parameter");
  }
  if (step < 1) throw std::invalid_argument("adamw_update: step is 1-based");
  if (first.size() == 0) first = Matrix<Scalar>::Zero(param.rows(), param.cols());
  if (second.size() == 0) second = Matrix<Scalar>::Zero(param.rows(), param.cols());

  const auto b1 = static_cast<Scalar>(opts.beta1);
  const auto b2 = static_cast<Scalar>(opts.beta2);
  const auto lr = static_cast<Scalar>(opts.lr);
  const auto bias1 = static_cast<Scalar>(1.0 - std::pow(opts.beta1, static_cast<double>(step)));
  const auto bias2 = static_cast<Scalar>(1.0 - std::pow(opts.beta2, static_cast<double>(step)));

  param *= Scalar(1) - lr * static_cast<Scalar>(weight_decay);
  first = b1 * first + (Scalar(1) - b1) * grad;
  second = b2 * second + (Scalar(1) - b2) * grad.cwiseProduct(grad);
  param.array() -= lr * (first.array() / bias1) /
                   ((second.array() / bias2).sqrt() + static_cast<Scalar>(opts.eps));
}

template <typename Scalar>
AdamW<Scalar>::AdamW(std::vector<Tensor<Scalar>> params, std::vector<bool> decay, AdamWOptions opts)
    : params_(std::move(params)),
      decay_(std::move(decay)),
      first_(params_.size()),
      second_(params_.size()),
      opts_(opts) {
  if (decay_.size() != params_.size()) throw std::invalid_argument("AdamW: one decay flag per parameter");
}

template <typename Scalar>
void AdamW<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename Scalar>
void AdamW<Scalar>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw std::runtime_error("AdamW: parameter " + std::to_string(i) + " " + params_[i].shape_string() +
                               " has no gradient");
    }
  }
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adamw_update(params_[i].mutable_value(), params_[i].grad(), first_[i], second_[i], opts_,
                 decay_[i] ? opts_.weight_decay : 0.0, step_);
  }
}

template void adamw_update(MatrixF&, const MatrixF&, MatrixF&, MatrixF&, const AdamWOptions&, double, std::int64_t);
template void adamw_update(MatrixD&, const MatrixD&, MatrixD&, MatrixD&, const AdamWOptions&, double, std::int64_t);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace prefmem
