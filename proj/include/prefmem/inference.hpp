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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prefmem/data.hpp"
#include "prefmem/memory.hpp"

namespace prefmem {

enum class InferenceProtocol { kIterative, kOneOff };

/// Items sorted by descending score, ties by ascending item id.
struct Ranking {
  std::vector<ItemId> items;
  std::vector<float> scores;
};

/// Streaming state for one user.
///
/// Under ITERATIVE a full working segment is absorbed into memory as soon as it
/// completes; the trailing `overlap` items stay in the working segment. Under
/// ONE_OFF items only accumulate and `compress()` builds the memory in one pass.
class InferenceSession {
 public:
  InferenceSession(const ParamsF& params, MemoryMode mode, InferenceProtocol protocol = InferenceProtocol::kIterative,
                   Index overlap = 0, std::string user_id = {});

  void ingest(ItemId item);
  void ingest(std::span<const ItemId> items);
  /// ONE_OFF only: compresses all full segments seen so far; the remainder
  /// becomes the working segment.
  void compress();

  const ParamsF& params() const { return *params_; }
  MemoryMode mode() const { return mode_; }
  InferenceProtocol protocol() const { return protocol_; }
  Index overlap() const { return overlap_; }
  const std::optional<MemoryState>& memory() const { return memory_; }
  const std::vector<ItemId>& working() const { return working_; }

  /// Inputs of the most recent memory-producing forward ([M; S; Q]).
  bool has_encode() const { return last_layout_.size() > 0; }
  const SequenceLayout& last_encode_layout() const { return last_layout_; }
  const MatrixF& last_encode_memory() const { return last_memory_; }

 private:
  void absorb_working();

  const ParamsF* params_;
  MemoryMode mode_;
  InferenceProtocol protocol_;
  Index overlap_;
  std::string user_id_;
  std::optional<MemoryState> memory_;
  std::vector<ItemId> working_;
  std::vector<ItemId> raw_;  // ONE_OFF history
  SequenceLayout last_layout_;
  MatrixF last_memory_;
};

/// Catalog logits for the item following the session's current state:
/// forwards [memory; working] causally and scores the last slot.
std::vector<float> score_next(const InferenceSession& session);
Ranking predict_next(const InferenceSession& session);

/// Catalog logits after a plain causal forward over `context` (positions from 0).
std::vector<float> score_plain(const ParamsF& params, std::span<const ItemId> context);

/// Sorts the whole catalog by descending score, ties by ascending id.
Ranking rank_items(std::span<const float> scores);

/// Compresses every full segment of `prefix` with a single interleaved-mask
/// forward. OVERWRITE keeps the last reference memory, APPEND all of them.
MemoryState oneoff_compress(const ParamsF& params, std::span<const ItemId> prefix, MemoryMode mode,
                            std::string user_id = {});

struct LatencyStats {
  std::size_t samples = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
};

LatencyStats summarize_latency(std::vector<double> samples_ms);

struct BenchReport {
  std::string protocol;
  LatencyStats predict;
  LatencyStats update;
  std::uint64_t bytes_per_user = 0;
  Index context_items = 0;
};

struct BenchOptions {
  Index segment_len = 16;
  Index short_len = 16;
  Index full_len = 64;
  MemoryMode mode = MemoryMode::kOverwrite;
  std::int64_t n_users = 32;
  int reps = 5;
};

/// Times next-item prediction (and memory updates) per protocol. Plain
/// protocols are skipped when their params are null. `reps == 0` yields an
/// empty report.
std::vector<BenchReport> bench(const ParamsF& memory_params, const ParamsF* short_params,
                               const ParamsF* full_params, const Dataset& dataset, const BenchOptions& opts);

}  // namespace prefmem
