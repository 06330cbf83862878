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

#include "prefmem/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "prefmem/eval.hpp"
#include "prefmem/memory.hpp"
#include "prefmem/training.hpp"

namespace prefmem {

namespace {

CheckResult check_masks() {
  CheckResult r{"masks", true, ""};
  SequenceLayout a;
  a.append_memory(1);
  const ItemId items[] = {1, 2};
  a.append_items(items, 0);
  a.append_queries(1, 0);
  const auto causal = build_causal_mask(a);
  if (!causal.row(3).all() || causal(0, 0) != true || causal.row(0).count() != 1) {
    r.passed = false;
    r.detail = "causal mask example failed";
  }
  const std::vector<std::vector<ItemId>> segs{{1, 2}, {3, 4}};
  const auto g = global_layout(segs, 1);
  const auto s1 = build_stage1_mask(g);
  const bool want[] = {true, true, false, true, true, true};
  for (Index j = 0; j < 6; ++j) {
    if (s1(5, j) != want[j]) {
      r.passed = false;
      r.detail = "stage-1 mask row 5 differs from {0,1,3,4,5}";
    }
  }
  return r;
}

CheckResult check_reference_equivalence(std::mt19937_64& rng) {
  CheckResult r{"reference_equivalence", true, ""};
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig mc;
    mc.catalog_size = 30;
    mc.dim = 8;
    mc.n_heads = 2;
    mc.slots = 1 << (trial % 3);
    mc.context_len = 4;
    const auto params = ParamsF::init(mc, rng());
    std::uniform_int_distribution<ItemId> item(0, 29);
    std::vector<ItemId> seq(static_cast<std::size_t>(4 * (1 + trial % 4) + trial % 3));
    for (auto& x : seq) x = item(rng);
    const auto hist = segment(seq, mc.context_len);
    NoGradGuard ng;
    const auto refs = stage1_reference_pass(params, hist);
    for (std::size_t h = 0; h < hist.size(); ++h) {
      const auto layout = prefix_layout(hist.segments, h, mc.slots);
      const MatrixF m = encode_memory(params, layout);
      worst = std::max(worst, static_cast<double>((m - refs[h].value()).cwiseAbs().maxCoeff()));
    }
  }
  r.passed = worst < 1e-5;
  r.detail = "max abs diff " + std::to_string(worst);
  return r;
}

CheckResult check_gradients(std::mt19937_64& rng) {
  CheckResult r{"gradients", true, ""};
  std::normal_distribution<double> nd(0.0, 1.0);
  auto random = [&](Index rows, Index cols) {
    MatrixD m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
  };
  TensorD x(random(3, 4), true), w(random(4, 4), true), g(random(1, 4), true), b(random(1, 4), true);
  const Index targets[] = {1, 3, 0};
  auto loss_fn = [&]() {
    auto h = gelu(layer_norm(matmul(x, w), g, b));
    return cross_entropy(matmul_transposed(h, w), std::span<const Index>(targets));
  };
  auto loss = loss_fn();
  loss.backward();
  double worst = 0.0;
  for (TensorD* t : {&x, &w, &g, &b}) {
    const MatrixD analytic = t->grad();
    for (Index i = 0; i < t->size(); ++i) {
      double& v = t->mutable_value().data()[i];
      const double keep = v;
      const double h = 1e-3;
      v = keep + h;
      const double up = loss_fn().item();
      v = keep - h;
      const double down = loss_fn().item();
      v = keep;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic.data()[i]), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic.data()[i]) / denom);
    }
  }
  r.passed = worst < 1e-3;
  r.detail = "max relative error " + std::to_string(worst);
  return r;
}

CheckResult check_metrics(std::mt19937_64& rng) {
  CheckResult r{"metrics", true, ""};
  std::uniform_int_distribution<int> size(1, 8), level(0, 3);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = size(rng);
    std::vector<float> scores(static_cast<std::size_t>(n));
    for (auto& s : scores) s = static_cast<float>(level(rng));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    const int target = std::uniform_int_distribution<int>(0, n - 1)(rng);
    const auto pos = std::find(order.begin(), order.end(), target) - order.begin();
    if (rank_of(scores, target) != pos + 1) ++mismatches;
  }
  r.passed = mismatches == 0;
  r.detail = std::to_string(mismatches) + " rank mismatches in 1000 cases";
  return r;
}

CheckResult check_storage() {
  CheckResult r{"storage", true, ""};
  const bool ok = memory_payload_bytes(4, 64, 1, MemoryMode::kOverwrite) == 1024 &&
                  memory_payload_bytes(4, 64, 4, MemoryMode::kAppend) == 4096 &&
                  kv_footprint_bytes(4, 64, 16, 1, MemoryMode::kOverwrite) == 32768 &&
                  kv_footprint_bytes(4, 64, 16, 4, MemoryMode::kAppend) == 131072;
  r.passed = ok;
  r.detail = ok ? "1 KB / 4 KB / 32 KB / 128 KB" : "byte counts differ";
  return r;
}

}  // namespace

std::vector<CheckResult> run_verify_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  auto guarded = [&](const std::string& name, const std::function<CheckResult()>& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("threw: ") + e.what()});
    }
  };
  guarded("masks", check_masks);
  guarded("reference_equivalence", [&] { return check_reference_equivalence(rng); });
  guarded("gradients", [&] { return check_gradients(rng); });
  guarded("metrics", [&] { return check_metrics(rng); });
  guarded("storage", check_storage);
  return out;
}

}  // namespace prefmem
