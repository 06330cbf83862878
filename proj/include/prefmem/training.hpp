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
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "prefmem/data.hpp"
#include "prefmem/memory.hpp"

namespace prefmem {

enum class TrainerKind { kRec2PM, kTokSerial, kPlainShort, kPlainFull };

std::string to_string(TrainerKind kind);
TrainerKind trainer_kind_from_string(const std::string& name);

struct TrainConfig {
  Index segment_len = 16;
  Index full_len = 64;
  Index short_len = 16;
  int slots = 4;
  Index dim = 32;
  int n_layers = 2;
  int n_heads = 2;
  double lr = 1e-3;
  double weight_decay = 0.1;
  int batch_size = 8;
  double consistency_weight = 1.0;  // λ
  MemoryMode mode = MemoryMode::kOverwrite;
  int epochs = 35;
  int patience = 10;
  std::uint64_t seed = 0;
  TrainerKind trainer = TrainerKind::kRec2PM;
  double recon_weight = 0.0;
  // Users scored for early stopping; 0 means all.
  std::int64_t valid_users = 0;

  void validate() const;
  /// Model shape for this trainer. Memory models size the position table to
  /// L_seg, plain models to their window.
  ModelConfig model_config(Index catalog_size) const;
  bool operator==(const TrainConfig&) const = default;
};

/// Stage-1 outputs for a batch of users, all from one packed forward.
template <typename Scalar>
struct ReferencePass {
  Tensor<Scalar> hidden;  // packed hidden rows
  // First hidden row of the QUERY block of segment h of user u.
  std::vector<std::vector<Index>> query_offset;
  int slots = 0;

  /// C×d reference memory m_ref of (user, segment); stays on the graph.
  Tensor<Scalar> m_ref(std::size_t user, std::size_t segment) const;
  /// Hidden rows forming M_ref_{h-1}, the stage-2 context of segment h ≥ 1.
  std::vector<Index> context_rows(std::size_t user, std::size_t h, MemoryMode mode) const;
};

/// One forward of the interleaved layout [S_0; Q; ...; S_k; Q] per user under
/// the stage-1 mask.
template <typename Scalar>
ReferencePass<Scalar> stage1_reference_pass(const ModelParams<Scalar>& params,
                                            std::span<const SegmentedHistory> users);

/// Single-user form returning [m_ref_0 .. m_ref_k].
template <typename Scalar>
std::vector<Tensor<Scalar>> stage1_reference_pass(const ModelParams<Scalar>& params, const SegmentedHistory& user);

/// M_ref_{h-1}: m_ref_{h-1} under OVERWRITE, [m_ref_0; ...; m_ref_{h-1}] under APPEND.
template <typename Scalar>
Tensor<Scalar> build_reference_context(std::span<const Tensor<Scalar>> m_refs, std::size_t h, MemoryMode mode);

template <typename Scalar>
struct TrainStepOutput {
  Tensor<Scalar> loss_total;
  Tensor<Scalar> loss_ar;
  Tensor<Scalar> loss_con;
  Tensor<Scalar> loss_recon;
  // Aligned pairs over every full segment of every user in the batch.
  std::vector<Tensor<Scalar>> m_ref;
  std::vector<Tensor<Scalar>> m_upd;
  Index n_targets = 0;
  // Stage-2 contexts are always reference memories, never rolled-out m_upd.
  bool teacher_forced = true;
};

struct StageTwoOptions {
  double consistency_weight = 1.0;
  double recon_weight = 0.0;
  MemoryMode mode = MemoryMode::kOverwrite;
  // Packing order over the flattened (user, segment) layouts; empty = natural.
  std::vector<std::size_t> pack_order;
};

/// Builds E_local per segment, packs them in one forward and computes
/// L = L_AR + λ·L_con + recon_weight·L_rec.
template <typename Scalar>
TrainStepOutput<Scalar> stage2_parallel_pass(const ModelParams<Scalar>& params,
                                             std::span<const SegmentedHistory> users,
                                             const ReferencePass<Scalar>& reference, const StageTwoOptions& opts);

/// Single-user form over an explicit list of reference memories.
template <typename Scalar>
TrainStepOutput<Scalar> stage2_parallel_pass(const ModelParams<Scalar>& params, const SegmentedHistory& user,
                                             std::span<const Tensor<Scalar>> m_refs, const StageTwoOptions& opts);

/// Mean over pairs of the per-element squared difference; references are
/// detached so gradients reach `m_upds` only.
template <typename Scalar>
Tensor<Scalar> consistency_loss(std::span<const Tensor<Scalar>> m_refs, std::span<const Tensor<Scalar>> m_upds);

/// Teacher-forced decode of `prefix` from memory `m`: the last MEMORY slot
/// predicts the first item and every item its successor.
template <typename Scalar>
Tensor<Scalar> reconstruction_loss(const ModelParams<Scalar>& params, const Tensor<Scalar>& m,
                                   std::span<const std::vector<ItemId>> prefix_segments);

template <typename Scalar>
struct SerialPassOutput {
  Tensor<Scalar> loss_total;                  // target-weighted mean of the segment losses
  std::vector<Tensor<Scalar>> segment_losses;  // L_AR per segment index
  std::vector<Tensor<Scalar>> segment_inputs;  // packed input embeddings per segment index
  Index n_targets = 0;
};

/// Serially unrolled token memory: one packed forward per segment index, the
/// memory handed to the next segment is detached.
template <typename Scalar>
SerialPassOutput<Scalar> serial_unrolled_pass(const ModelParams<Scalar>& params,
                                              std::span<const SegmentedHistory> users, MemoryMode mode);

/// One causal window of a plain model.
struct PlainInstance {
  std::vector<ItemId> inputs;
  std::vector<ItemId> targets;
};

/// SHORT: non-overlapping windows of `short_len` inputs. FULL: the last
/// `full_len` inputs as one window.
std::vector<PlainInstance> plain_instances(std::span<const ItemId> prefix, TrainerKind kind, Index window);

template <typename Scalar>
Tensor<Scalar> plain_loss(const ModelParams<Scalar>& params, std::span<const PlainInstance> instances);

/// Training prefix of a user: items[0..n-2) truncated to its last L_full+1 items.
std::vector<ItemId> training_prefix(const UserSequence& user, Index full_len);

struct EpochLog {
  int epoch = 0;
  double loss_total = 0.0;
  double loss_ar = 0.0;
  double loss_con = 0.0;
  double loss_recon = 0.0;
  double valid_h10 = 0.0;
  double valid_con_mse = 0.0;  // memory trainers only
  double seconds = 0.0;
  std::string to_json() const;
};

struct TrainResult {
  ParamsF params;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_valid_h10 = 0.0;
  double seconds = 0.0;
};

TrainResult train_rec2pm(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log = nullptr);
TrainResult train_serial_baseline(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log = nullptr);
TrainResult train_plain(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log = nullptr);
/// Dispatches on `cfg.trainer`.
TrainResult train(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log = nullptr);

/// Mean per-pair MSE(m_upd, m_ref) over the training prefixes of the first
/// `max_users` users (0 = all), without gradients.
double mean_consistency_mse(const ParamsF& params, const Dataset& dataset, const TrainConfig& cfg,
                            std::int64_t max_users = 0);

}  // namespace prefmem
