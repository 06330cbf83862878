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

#include <cstdint>
#include <vector>

#include "prefmem/tensor.hpp"

namespace prefmem {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam update of `param` in place.
///
/// `step` is 1-based. `first` and `second` are the moment buffers, resized and
/// zeroed on first use.
template <typename Scalar>
void adamw_update(Matrix<Scalar>& param, const Matrix<Scalar>& grad, Matrix<Scalar>& first, Matrix<Scalar>& second,
                  const AdamWOptions& opts, double weight_decay, std::int64_t step);

/// AdamW over a fixed parameter list.
///
/// Weight decay applies only to tensors flagged in `decay`; every parameter
/// must carry a gradient when `step()` runs.
template <typename Scalar>
class AdamW {
 public:
  AdamW(std::vector<Tensor<Scalar>> params, std::vector<bool> decay, AdamWOptions opts);

  void zero_grad();
  void step();
  std::int64_t steps_taken() const { return step_; }
  const AdamWOptions& options() const { return opts_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  std::vector<bool> decay_;
  std::vector<Matrix<Scalar>> first_;
  std::vector<Matrix<Scalar>> second_;
  AdamWOptions opts_;
  std::int64_t step_ = 0;
};

}  // namespace prefmem
