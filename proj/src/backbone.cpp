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

#include "prefmem/backbone.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace prefmem {

Index SequenceLayout::count(Role role) const {
  Index n = 0;
  for (const auto& s : slots) n += s.role == role ? 1 : 0;
  return n;
}

std::vector<Index> SequenceLayout::positions(Role role) const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i) {
    if (slots[static_cast<std::size_t>(i)].role == role) out.push_back(i);
  }
  return out;
}

std::vector<Index> SequenceLayout::query_positions(int segment) const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i) {
    const auto& s = slots[static_cast<std::size_t>(i)];
    if (s.role == Role::kQuery && s.segment == segment) out.push_back(i);
  }
  return out;
}

void SequenceLayout::append_memory(Index rows, int segment) {
  for (Index r = 0; r < rows; ++r) slots.push_back({Role::kMemory, segment, static_cast<int>(r), -1});
}

void SequenceLayout::append_items(std::span<const ItemId> items, int segment) {
  for (std::size_t i = 0; i < items.size(); ++i) {
    slots.push_back({Role::kItem, segment, static_cast<int>(i), items[i]});
  }
}

void SequenceLayout::append_queries(int n, int segment) {
  for (int c = 0; c < n; ++c) slots.push_back({Role::kQuery, segment, c, -1});
}

SequenceLayout encode_layout(Index memory_rows, std::span<const ItemId> segment, int slots, int segment_index) {
  SequenceLayout layout;
  layout.append_memory(memory_rows, segment_index - 1);
  layout.append_items(segment, segment_index);
  layout.append_queries(slots, segment_index);
  return layout;
}

SequenceLayout decode_layout(Index memory_rows, std::span<const ItemId> segment, int segment_index) {
  SequenceLayout layout;
  layout.append_memory(memory_rows, segment_index - 1);
  layout.append_items(segment, segment_index);
  return layout;
}

SequenceLayout global_layout(std::span<const std::vector<ItemId>> segments, int slots) {
  SequenceLayout layout;
  for (std::size_t h = 0; h < segments.size(); ++h) {
    layout.append_items(segments[h], static_cast<int>(h));
    layout.append_queries(slots, static_cast<int>(h));
  }
  return layout;
}

SequenceLayout prefix_layout(std::span<const std::vector<ItemId>> segments, std::size_t last, int slots) {
  if (last >= segments.size()) throw std::out_of_range("prefix_layout: segment index out of range");
  SequenceLayout layout;
  for (std::size_t h = 0; h <= last; ++h) layout.append_items(segments[h], static_cast<int>(h));
  layout.append_queries(slots, static_cast<int>(last));
  return layout;
}

AttentionMask build_causal_mask(const SequenceLayout& layout) {
  const Index t = layout.size();
  AttentionMask mask(t, t);
  for (Index i = 0; i < t; ++i) {
    for (Index j = 0; j < t; ++j) mask(i, j) = j <= i;
  }
  return mask;
}

AttentionMask build_stage1_mask(const SequenceLayout& layout) {
  const Index t = layout.size();
  AttentionMask mask(t, t);
  for (Index i = 0; i < t; ++i) {
    const Slot& row = layout.slots[static_cast<std::size_t>(i)];
    if (row.role == Role::kMemory) {
      throw std::invalid_argument("build_stage1_mask: reference layouts hold raw items only, found a MEMORY slot");
    }
    for (Index j = 0; j < t; ++j) {
      const Slot& col = layout.slots[static_cast<std::size_t>(j)];
      bool allowed = j <= i;
      if (col.role == Role::kQuery) {
        // Queries are visible only to later queries of the same block.
        allowed = allowed && row.role == Role::kQuery && row.segment == col.segment;
      }
      mask(i, j) = allowed;
    }
  }
  return mask;
}

void ModelConfig::validate() const {
  if (catalog_size < 1 || dim < 1 || n_layers < 0 || n_heads < 1 || slots < 1 || context_len < 1) {
    throw std::invalid_argument("ModelConfig: all sizes must be positive");
  }
  if (dim % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: dim " + std::to_string(dim) + " not divisible by " +
                                std::to_string(n_heads) + " heads");
  }
}

namespace {

template <typename Scalar>
Tensor<Scalar> normal_leaf(std::mt19937_64& rng, Index rows, Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(std::move(m), true);
}

template <typename Scalar>
Tensor<Scalar> constant_leaf(Index cols, Scalar v) {
  return Tensor<Scalar>(Matrix<Scalar>::Constant(1, cols, v), true);
}

template <typename Scalar>
Tensor<Scalar> copy_leaf(const Tensor<Scalar>& t) {
  return Tensor<Scalar>(t.value(), true);
}

}  // namespace

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Index d = config.dim;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * std::max(1, config.n_layers));

  ModelParams p;
  p.config = config;
  p.item_embeddings = normal_leaf<Scalar>(rng, config.catalog_size, d, emb_std);
  p.position_embeddings = normal_leaf<Scalar>(rng, config.context_len, d, 0.1 * emb_std);
  p.slot_embeddings = normal_leaf<Scalar>(rng, config.slots, d, 0.1 * emb_std);
  p.role_embeddings = normal_leaf<Scalar>(rng, 3, d, 0.1 * emb_std);
  p.memory_queries = normal_leaf<Scalar>(rng, config.slots, d, emb_std);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams<Scalar> layer;
    layer.ln1_gamma = constant_leaf<Scalar>(d, Scalar(1));
    layer.ln1_beta = constant_leaf<Scalar>(d, Scalar(0));
    layer.wq = normal_leaf<Scalar>(rng, d, d, w_std);
    layer.wk = normal_leaf<Scalar>(rng, d, d, w_std);
    layer.wv = normal_leaf<Scalar>(rng, d, d, w_std);
    layer.wo = normal_leaf<Scalar>(rng, d, d, out_std);
    layer.ln2_gamma = constant_leaf<Scalar>(d, Scalar(1));
    layer.ln2_beta = constant_leaf<Scalar>(d, Scalar(0));
    layer.w1 = normal_leaf<Scalar>(rng, d, 4 * d, w_std);
    layer.b1 = constant_leaf<Scalar>(4 * d, Scalar(0));
    layer.w2 = normal_leaf<Scalar>(rng, 4 * d, d, out_std / 2.0);
    layer.b2 = constant_leaf<Scalar>(d, Scalar(0));
    p.layers.push_back(std::move(layer));
  }
  p.final_gamma = constant_leaf<Scalar>(d, Scalar(1));
  p.final_beta = constant_leaf<Scalar>(d, Scalar(0));
  return p;
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> ModelParams<Scalar>::named_tensors() const {
  std::vector<NamedTensor<Scalar>> out{
      {"item_embeddings", item_embeddings, true},   {"position_embeddings", position_embeddings, true},
      {"slot_embeddings", slot_embeddings, true},   {"role_embeddings", role_embeddings, true},
      {"memory_queries", memory_queries, true},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "ln1.gamma", L.ln1_gamma, false});
    out.push_back({pre + "ln1.beta", L.ln1_beta, false});
    out.push_back({pre + "attn.wq", L.wq, true});
    out.push_back({pre + "attn.wk", L.wk, true});
    out.push_back({pre + "attn.wv", L.wv, true});
    out.push_back({pre + "attn.wo", L.wo, true});
    out.push_back({pre + "ln2.gamma", L.ln2_gamma, false});
    out.push_back({pre + "ln2.beta", L.ln2_beta, false});
    out.push_back({pre + "ffn.w1", L.w1, true});
    out.push_back({pre + "ffn.b1", L.b1, false});
    out.push_back({pre + "ffn.w2", L.w2, true});
    out.push_back({pre + "ffn.b2", L.b2, false});
  }
  out.push_back({"final.gamma", final_gamma, false});
  out.push_back({"final.beta", final_beta, false});
  return out;
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::clone() const {
  return cast<Scalar>();
}

template <typename Scalar>
template <typename Other>
ModelParams<Other> ModelParams<Scalar>::cast() const {
  auto conv = [](const Tensor<Scalar>& t) { return Tensor<Other>(t.value().template cast<Other>(), true); };
  ModelParams<Other> p;
  p.config = config;
  p.item_embeddings = conv(item_embeddings);
  p.position_embeddings = conv(position_embeddings);
  p.slot_embeddings = conv(slot_embeddings);
  p.role_embeddings = conv(role_embeddings);
  p.memory_queries = conv(memory_queries);
  for (const auto& L : layers) {
    LayerParams<Other> o;
    o.ln1_gamma = conv(L.ln1_gamma);
    o.ln1_beta = conv(L.ln1_beta);
    o.wq = conv(L.wq);
    o.wk = conv(L.wk);
    o.wv = conv(L.wv);
    o.wo = conv(L.wo);
    o.ln2_gamma = conv(L.ln2_gamma);
    o.ln2_beta = conv(L.ln2_beta);
    o.w1 = conv(L.w1);
    o.b1 = conv(L.b1);
    o.w2 = conv(L.w2);
    o.b2 = conv(L.b2);
    p.layers.push_back(std::move(o));
  }
  p.final_gamma = conv(final_gamma);
  p.final_beta = conv(final_beta);
  return p;
}

template <typename Scalar>
Index PackedBatch<Scalar>::add(SequenceLayout layout, AttentionMask mask, std::span<const Index> memory_rows_for_layout) {
  if (mask.rows() != layout.size() || mask.cols() != layout.size()) {
    throw ShapeError("PackedBatch::add: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     " for a layout of " + std::to_string(layout.size()) + " slots");
  }
  if (static_cast<Index>(memory_rows_for_layout.size()) != layout.count(Role::kMemory)) {
    throw std::invalid_argument("PackedBatch::add: " + std::to_string(layout.count(Role::kMemory)) +
                                " MEMORY slots but " + std::to_string(memory_rows_for_layout.size()) +
                                " memory rows bound");
  }
  const Index offset = total_;
  offsets.push_back(offset);
  total_ += layout.size();
  memory_rows.insert(memory_rows.end(), memory_rows_for_layout.begin(), memory_rows_for_layout.end());
  layouts.push_back(std::move(layout));
  masks.push_back(std::make_shared<const AttentionMask>(std::move(mask)));
  return offset;
}

template <typename Scalar>
std::vector<AttentionBlock> PackedBatch<Scalar>::blocks() const {
  std::vector<AttentionBlock> out;
  out.reserve(layouts.size());
  for (std::size_t i = 0; i < layouts.size(); ++i) out.push_back({offsets[i], masks[i]});
  return out;
}

template <typename Scalar>
Tensor<Scalar> embed_packed(const ModelParams<Scalar>& params, const PackedBatch<Scalar>& batch) {
  const auto& cfg = params.config;
  const Index n = batch.total_rows();
  std::vector<Index> item_idx(n, -1), pos_idx(n, -1), role_idx(n, -1), slot_idx(n, -1), query_idx(n, -1),
      mem_idx(n, -1);
  bool any_item = false, any_query = false, any_memory = false;
  std::size_t next_memory = 0;
  Index r = 0;
  for (const auto& layout : batch.layouts) {
    for (const auto& s : layout.slots) {
      role_idx[r] = static_cast<Index>(s.role);
      switch (s.role) {
        case Role::kItem:
          if (s.item < 0 || s.item >= cfg.catalog_size) {
            throw std::out_of_range("embed: unknown item id " + std::to_string(s.item) + " (catalog size " +
                                    std::to_string(cfg.catalog_size) + ")");
          }
          if (s.within < 0 || s.within >= cfg.context_len) {
            throw std::out_of_range("embed: item position " + std::to_string(s.within) + " exceeds context length " +
                                    std::to_string(cfg.context_len));
          }
          item_idx[r] = s.item;
          pos_idx[r] = s.within;
          any_item = true;
          break;
        case Role::kQuery:
          if (s.within < 0 || s.within >= cfg.slots) {
            throw std::out_of_range("embed: query index " + std::to_string(s.within) + " outside C=" +
                                    std::to_string(cfg.slots));
          }
          query_idx[r] = s.within;
          slot_idx[r] = s.within;
          any_query = true;
          break;
        case Role::kMemory:
          if (next_memory >= batch.memory_rows.size() || !batch.memory_source.defined()) {
            throw std::invalid_argument("embed: MEMORY slot without memory content");
          }
          mem_idx[r] = batch.memory_rows[next_memory++];
          if (mem_idx[r] < 0 || mem_idx[r] >= batch.memory_source.rows()) {
            throw std::out_of_range("embed: memory row " + std::to_string(mem_idx[r]) + " outside memory content of " +
                                    std::to_string(batch.memory_source.rows()) + " rows");
          }
          slot_idx[r] = s.within % cfg.slots;
          any_memory = true;
          break;
      }
      ++r;
    }
  }
  if (any_memory && batch.memory_source.cols() != cfg.dim) {
    throw ShapeError("embed: memory content has " + std::to_string(batch.memory_source.cols()) +
                     " columns, model dim is " + std::to_string(cfg.dim));
  }

  Tensor<Scalar> e = gather_rows(params.role_embeddings, std::span<const Index>(role_idx));
  if (any_item) {
    e = gather_rows(params.item_embeddings, std::span<const Index>(item_idx)) + e;
    e = e + gather_rows(params.position_embeddings, std::span<const Index>(pos_idx));
  }
  if (any_query || any_memory) e = e + gather_rows(params.slot_embeddings, std::span<const Index>(slot_idx));
  if (any_query) e = e + gather_rows(params.memory_queries, std::span<const Index>(query_idx));
  if (any_memory) e = e + gather_rows(batch.memory_source, std::span<const Index>(mem_idx));
  return e;
}

template <typename Scalar>
Tensor<Scalar> embed_layout(const ModelParams<Scalar>& params, const SequenceLayout& layout,
                            const Tensor<Scalar>* memory_values) {
  PackedBatch<Scalar> batch;
  std::vector<Index> rows;
  const Index n_mem = layout.count(Role::kMemory);
  if (n_mem > 0) {
    if (memory_values == nullptr || !memory_values->defined()) {
      throw std::invalid_argument("embed_layout: layout has MEMORY slots but no memory content was given");
    }
    if (memory_values->rows() != n_mem) {
      throw std::invalid_argument("embed_layout: " + std::to_string(n_mem) + " MEMORY slots but memory content has " +
                                  std::to_string(memory_values->rows()) + " rows");
    }
    batch.memory_source = *memory_values;
    for (Index i = 0; i < n_mem; ++i) rows.push_back(i);
  }
  AttentionMask unused = AttentionMask::Constant(layout.size(), layout.size(), true);
  batch.add(layout, std::move(unused), rows);
  return embed_packed(params, batch);
}

template <typename Scalar>
Tensor<Scalar> transformer_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& inputs,
                                   std::span<const AttentionBlock> blocks, AttentionTrace<Scalar>* trace) {
  if (inputs.cols() != params.config.dim) {
    throw ShapeError("transformer_forward: inputs " + inputs.shape_string() + " for model dim " +
                     std::to_string(params.config.dim));
  }
  Tensor<Scalar> h = inputs;
  for (const auto& L : params.layers) {
    std::vector<Matrix<Scalar>>* probs = nullptr;
    if (trace != nullptr) {
      trace->layers.emplace_back();
      probs = &trace->layers.back();
    }
    Tensor<Scalar> a = layer_norm(h, L.ln1_gamma, L.ln1_beta);
    Tensor<Scalar> att = attention(matmul(a, L.wq), matmul(a, L.wk), matmul(a, L.wv), blocks,
                                   params.config.n_heads, probs);
    h = h + matmul(att, L.wo);
    Tensor<Scalar> f = layer_norm(h, L.ln2_gamma, L.ln2_beta);
    f = gelu(add_row(matmul(f, L.w1), L.b1));
    h = h + add_row(matmul(f, L.w2), L.b2);
  }
  Tensor<Scalar> out = layer_norm(h, params.final_gamma, params.final_beta);
  if (!out.value().allFinite()) throw NumericError("transformer_forward: non-finite hidden state");
  return out;
}

template <typename Scalar>
Tensor<Scalar> transformer_forward(const ModelParams<Scalar>& params, const Tensor<Scalar>& inputs,
                                   const AttentionMask& mask, AttentionTrace<Scalar>* trace) {
  if (mask.rows() != inputs.rows() || mask.cols() != inputs.rows()) {
    throw ShapeError("transformer_forward: mask does not match " + inputs.shape_string());
  }
  const AttentionBlock block{0, std::make_shared<const AttentionMask>(mask)};
  return transformer_forward(params, inputs, std::span<const AttentionBlock>(&block, 1), trace);
}

template <typename Scalar>
Tensor<Scalar> forward_packed(const ModelParams<Scalar>& params, const PackedBatch<Scalar>& batch,
                              AttentionTrace<Scalar>* trace) {
  const auto blocks = batch.blocks();
  return transformer_forward(params, embed_packed(params, batch), std::span<const AttentionBlock>(blocks), trace);
}

template <typename Scalar>
Tensor<Scalar> item_logits(const ModelParams<Scalar>& params, const Tensor<Scalar>& hidden_rows) {
  return matmul_transposed(hidden_rows, params.item_embeddings);
}

#define PREFMEM_INSTANTIATE_BACKBONE(S)                                                                          \
  template struct ModelParams<S>;                                                                                \
  template struct PackedBatch<S>;                                                                                \
  template Tensor<S> embed_layout(const ModelParams<S>&, const SequenceLayout&, const Tensor<S>*);              \
  template Tensor<S> embed_packed(const ModelParams<S>&, const PackedBatch<S>&);                                 \
  template Tensor<S> transformer_forward(const ModelParams<S>&, const Tensor<S>&, std::span<const AttentionBlock>, \
                                         AttentionTrace<S>*);                                                    \
  template Tensor<S> transformer_forward(const ModelParams<S>&, const Tensor<S>&, const AttentionMask&,          \
                                         AttentionTrace<S>*);                                                    \
  template Tensor<S> forward_packed(const ModelParams<S>&, const PackedBatch<S>&, AttentionTrace<S>*);           \
  template Tensor<S> item_logits(const ModelParams<S>&, const Tensor<S>&);

PREFMEM_INSTANTIATE_BACKBONE(float)
PREFMEM_INSTANTIATE_BACKBONE(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

#undef PREFMEM_INSTANTIATE_BACKBONE

}  // namespace prefmem
