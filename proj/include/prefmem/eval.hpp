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
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefmem/data.hpp"
#include "prefmem/inference.hpp"
#include "prefmem/training.hpp"

namespace prefmem {

enum class Protocol { kShort, kFull, kMemIterative, kMemOneOff, kMemOverlap };

std::string to_string(Protocol protocol);
Protocol protocol_from_string(const std::string& name);
bool is_memory_protocol(Protocol protocol);

int hit_at_k(Index rank, Index k);
double ndcg_at_k(Index rank, Index k);

/// 1-based rank of `target`: 1 + items scoring higher + equal-scoring items
/// with a smaller id.
Index rank_of(std::span<const float> scores, ItemId target);

inline constexpr Index kReportCutoffs[] = {1, 10, 50};

/// Metric means in percent, keyed "H@1", "H@10", "H@50", "N@10", "N@50".
struct EvalReport {
  std::map<std::string, double> metrics;
  std::int64_t n_users = 0;
  std::string protocol;
  std::vector<std::uint64_t> seeds;

  double at(const std::string& key) const { return metrics.at(key); }
  /// Bounds, H@K monotone in K and N@K ≤ H@K; throws std::logic_error.
  void check_invariants() const;
  nlohmann::json to_json() const;
};

enum class EvalTarget { kTest, kValid };

struct EvalOptions {
  MemoryMode mode = MemoryMode::kOverwrite;
  Index full_len = 64;  // memory protocols see the last (L_full/L_seg)·L_seg − 1 items
  EvalTarget target = EvalTarget::kTest;
  std::int64_t max_users = 0;  // 0 = all
};

/// Ranks the whole catalog against each user's held-out item.
EvalReport evaluate(const ParamsF& params, const Dataset& dataset, Protocol protocol, const EvalOptions& opts);

/// Items the protocol conditions on for a user whose target sits at `target_index`.
std::vector<ItemId> protocol_context(const UserSequence& user, std::size_t target_index, Protocol protocol,
                                     Index context_len, Index full_len);

/// Arithmetic mean of reports of one protocol (e.g. over seeds).
EvalReport average_reports(std::span<const EvalReport> reports);

struct AblationOptions {
  std::vector<std::uint64_t> seeds{0};
  std::vector<int> slot_sweep{1, 2, 4, 8, 16};
  double recon_weight = 1.0;
  std::int64_t con_mse_users = 200;
};

struct AblationRow {
  std::string name;
  TrainConfig config;
  EvalReport iterative;
  EvalReport overlap;  // only for the overlap row
  double con_mse = 0.0;
  nlohmann::json to_json() const;
};

/// λ∈{0,1}, a slot sweep, recon_weight∈{0,>0} and overlap∈{0,L_seg/4}, each
/// trained per seed and averaged.
std::vector<AblationRow> run_ablation_suite(const Dataset& dataset, const TrainConfig& base,
                                            const AblationOptions& opts, std::ostream* progress = nullptr);
nlohmann::json ablation_table(std::span<const AblationRow> rows);

struct AttentionExportOptions {
  bool raw = false;         // one row per layer and head instead of the mean
  int n_categories = 0;     // > 0 adds per-category rows
};

/// CSV ("slot,target,weight,kind") of the QUERY rows' attention in the
/// session's last memory-producing forward.
std::string export_attention(const InferenceSession& session, const AttentionExportOptions& opts = {});

}  // namespace prefmem
