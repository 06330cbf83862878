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
#include <string>
#include <vector>

namespace prefmem {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Self-contained invariant checks: masks, reference-pass equivalence,
/// gradients, ranking metrics and storage arithmetic. Needs no trained model.
std::vector<CheckResult> run_verify_suite(std::uint64_t seed = 0);

}  // namespace prefmem
