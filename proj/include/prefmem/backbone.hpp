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
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prefmem/tensor.hpp"

namespace prefmem {

using ItemId = std::int32_t;

enum class Role : std::uint8_t { kMemory = 0, kItem = 1, kQuery = 2 };

/// One position of a constructed input sequence.
///
/// `within` is the item position inside its segment for ITEM slots, the memory
/// row for MEMORY slots and the query index c for QUERY slots.
struct Slot {
  Role role = Role::kItem;
  int segment = 0;
  int within = 0;
  ItemId item = -1;
};

struct SequenceLayout {
  std::vector<Slot> slots;

  Index size() const { return static_cast<Index>(slots.size()); }
  Index count(Role role) const;
  /// Positions of all slots with `role`, in order.
  std::vector<Index> positions(Role role) const;
  /// Positions of the QUERY slots belonging to `segment`.
  std::vector<Index> query_positions(int segment) const;

  void append_memory(Index rows, int segment = -1);
  void append_items(std::span<const ItemId> items, int segment);
  void append_queries(int slots, int segment);
};

using AttentionMask = BoolMatrix;

/// [M; S; Q]: `memory_rows` memory slots, one segment, then C queries.
SequenceLayout encode_layout(Index memory_rows, std::span<const ItemId> segment, int slots, int segment_index = 0);
/// [M; S]: the next-item decoding input.
SequenceLayout decode_layout(Index memory_rows, std::span<const ItemId> segment, int segment_index = 0);
/// [S_0; Q; S_1; Q; ...; S_k; Q] for global reference generation.
SequenceLayout global_layout(std::span<const std::vector<ItemId>> segments, int slots);
/// [S_0; ...; S_last; Q] with within-segment item positions.
SequenceLayout prefix_layout(std::span<const std::vector<ItemId>> segments, std::size_t last, int slots);

/// Slot i attends slot j iff j <= i.
AttentionMask build_causal_mask(const SequenceLayout& layout);
/// Interleaved reference mask: items see earlier items only, each QUERY block
/// sees items of its own and earlier segments plus its own block causally.
/// Throws std::invalid_argument when the layout holds MEMORY slots.
AttentionMask build_stage1_mask(const SequenceLayout& layout);

struct ModelConfig {
  Index catalog_size = 500;
  Index dim = 32;
  int n_layers = 2;
  int n_heads = 2;
  int slots = 4;          // memory slots C
  Index context_len = 16; // rows of the position table
  bool memory = true;     // trained with memory tokens (false for plain baselines)

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct LayerParams {
  Tensor<Scalar> ln1_gamma, ln1_beta;
  Tensor<Scalar> wq, wk, wv, wo;
  Tensor<Scalar> ln2_gamma, ln2_beta;
  Tensor<Scalar> w1, b1, w2, b2;
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
  bool decay = true;
};

/// Shared encoder/decoder weights plus the memory query vectors.
template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  Tensor<Scalar> item_embeddings;      // |I|×d, tied to the output head
  Tensor<Scalar> position_embeddings;  // context_len×d
  Tensor<Scalar> slot_embeddings;      // C×d
  Tensor<Scalar> role_embeddings;      // 3×d
  Tensor<Scalar> memory_queries;       // C×d
  std::vector<LayerParams<Scalar>> layers;
  Tensor<Scalar> final_gamma, final_beta;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Every tensor with a stable name, in serialization order.
  std::vector<NamedTensor<Scalar>> named_tensors() const;
  /// Deep copy; the copy's tensors are fresh leaves.
  ModelParams clone() const;
  template <typename Other>
  ModelParams<Other> cast() const;
};

using ParamsF = ModelParams<float>;

/// Several layouts packed row-wise for one forward call.
///
/// MEMORY slots read their content from rows of `memory_source`, one entry of
/// `memory_rows` per MEMORY slot in packed order.
template <typename Scalar>
struct PackedBatch {
  std::vector<SequenceLayout> layouts;
  std::vector<std::shared_ptr<const AttentionMask>> masks;
  std::vector<Index> offsets;
  Tensor<Scalar> memory_source;
  std::vector<Index> memory_rows;

  /// Appends a layout; returns its packed row offset.
  Index add(SequenceLayout layout, AttentionMask mask, std::span<const Index> memory_rows_for_layout = {});
  Index total_rows() const { return total_; }
  std::size_t size() const { return layouts.size(); }
  std::vector<AttentionBlock> blocks() const;

 private:
  Index total_ = 0;
};

/// Per-layer attention probabilities from one forward pass, block-major then
/// head-minor within each layer.
template <typename Scalar>
struct AttentionTrace {
  std::vector<std::vector<Matrix<Scalar>>> layers;
};

/// Input embedding for a single layout. MEMORY rows come from `memory_values`
/// verbatim (no projection) plus slot and role embeddings.
template <typename Scalar>
Tensor<Scalar> embed_layout(const ModelParams<Scalar>& params, const SequenceLayout& layout,
                            const Tensor<Scalar>* memory_values = nullptr);

template <typename Scalar>
Tensor<Scalar> embed_packed(const ModelParams<Scalar>& params, const PackedBatch<Scalar>& batch);

/// Pre-norm transformer stack followed by a final layer norm.
template <typename Scalar>
Tensor<Scalar> transformer_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& inputs,
                                   std::span<const AttentionBlock> blocks, AttentionTrace<Scalar>* trace = nullptr);

template <typename Scalar>
Tensor<Scalar> transformer_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& inputs,
                                   const AttentionMask& mask, AttentionTrace<Scalar>* trace = nullptr);

/// Embeds and runs the whole batch; returns the packed N×d hidden states.
template <typename Scalar>
Tensor<Scalar> forward_packed(const ModelParams<Scalar>& params, const PackedBatch<Scalar>& batch,
                              AttentionTrace<Scalar>* trace = nullptr);

/// Scores against the tied item table: rows×|I|.
template <typename Scalar>
Tensor<Scalar> item_logits(const ModelParams<Scalar>& params, const Tensor<Scalar>& hidden_rows);

}  // namespace prefmem
