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

#include "prefmem/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "prefmem/eval.hpp"
#include "prefmem/optim.hpp"

namespace prefmem {

std::string to_string(TrainerKind kind) {
  switch (kind) {
    case TrainerKind::kRec2PM: return "rec2pm";
    case TrainerKind::kTokSerial: return "tok-serial";
    case TrainerKind::kPlainShort: return "short";
    case TrainerKind::kPlainFull: return "full";
  }
  return "unknown";
}

TrainerKind trainer_kind_from_string(const std::string& name) {
  if (name == "rec2pm") return TrainerKind::kRec2PM;
  if (name == "tok-serial") return TrainerKind::kTokSerial;
  if (name == "short") return TrainerKind::kPlainShort;
  if (name == "full") return TrainerKind::kPlainFull;
  throw std::invalid_argument("unknown trainer '" + name + "' (expected rec2pm, tok-serial, short or full)");
}

namespace {

bool is_memory_trainer(TrainerKind kind) { return kind == TrainerKind::kRec2PM || kind == TrainerKind::kTokSerial; }

}  // namespace

void TrainConfig::validate() const {
  if (segment_len < 1 || full_len < 1 || short_len < 1) throw std::invalid_argument("TrainConfig: lengths must be >= 1");
  if (is_memory_trainer(trainer) && (full_len < segment_len || full_len % segment_len != 0)) {
    throw std::invalid_argument("TrainConfig: full_len " + std::to_string(full_len) +
                                " must be a positive multiple of segment_len " + std::to_string(segment_len));
  }
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(consistency_weight >= 0.0)) throw std::invalid_argument("TrainConfig: consistency weight must be >= 0");
  if (!(recon_weight >= 0.0)) throw std::invalid_argument("TrainConfig: recon_weight must be >= 0");
  if (!(lr > 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: bad lr or weight_decay");
  if (epochs < 0 || patience < 1 || valid_users < 0) {
    throw std::invalid_argument("TrainConfig: epochs >= 0, patience >= 1 and valid_users >= 0 required");
  }
  model_config(1).validate();
}

ModelConfig TrainConfig::model_config(Index catalog_size) const {
  ModelConfig mc;
  mc.catalog_size = catalog_size;
  mc.dim = dim;
  mc.n_layers = n_layers;
  mc.n_heads = n_heads;
  mc.slots = slots;
  switch (trainer) {
    case TrainerKind::kRec2PM:
    case TrainerKind::kTokSerial: mc.context_len = segment_len; break;
    case TrainerKind::kPlainShort: mc.context_len = short_len; break;
    case TrainerKind::kPlainFull: mc.context_len = full_len; break;
  }
  mc.memory = is_memory_trainer(trainer);
  return mc;
}

template <typename Scalar>
Tensor<Scalar> ReferencePass<Scalar>::m_ref(std::size_t user, std::size_t segment) const {
  return slice_rows(hidden, query_offset.at(user).at(segment), slots);
}

template <typename Scalar>
std::vector<Index> ReferencePass<Scalar>::context_rows(std::size_t user, std::size_t h, MemoryMode mode) const {
  const auto& offs = query_offset.at(user);
  if (h < 1 || h >= offs.size()) {
    throw std::out_of_range("reference context for segment " + std::to_string(h) + " of a " +
                            std::to_string(offs.size()) + "-segment history");
  }
  std::vector<Index> rows;
  const std::size_t first = mode == MemoryMode::kOverwrite ? h - 1 : 0;
  for (std::size_t j = first; j < h; ++j) {
    for (int c = 0; c < slots; ++c) rows.push_back(offs[j] + c);
  }
  return rows;
}

template <typename Scalar>
ReferencePass<Scalar> stage1_reference_pass(const ModelParams<Scalar>& params,
                                            std::span<const SegmentedHistory> users) {
  const int c = params.config.slots;
  PackedBatch<Scalar> batch;
  ReferencePass<Scalar> out;
  out.slots = c;
  for (const auto& user : users) {
    if (user.size() == 0) throw std::invalid_argument("stage1_reference_pass: empty history");
    SequenceLayout layout = global_layout(user.segments, c);
    AttentionMask mask = build_stage1_mask(layout);
    std::vector<Index> offs;
    for (std::size_t h = 0; h < user.size(); ++h) offs.push_back(layout.query_positions(static_cast<int>(h)).front());
    const Index base = batch.add(std::move(layout), std::move(mask));
    for (auto& o : offs) o += base;
    out.query_offset.push_back(std::move(offs));
  }
  out.hidden = forward_packed(params, batch);
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> stage1_reference_pass(const ModelParams<Scalar>& params, const SegmentedHistory& user) {
  const auto ref = stage1_reference_pass(params, std::span<const SegmentedHistory>(&user, 1));
  std::vector<Tensor<Scalar>> out;
  for (std::size_t h = 0; h < user.size(); ++h) out.push_back(ref.m_ref(0, h));
  return out;
}

template <typename Scalar>
Tensor<Scalar> build_reference_context(std::span<const Tensor<Scalar>> m_refs, std::size_t h, MemoryMode mode) {
  if (h < 1 || h >= m_refs.size()) {
    throw std::out_of_range("build_reference_context: h=" + std::to_string(h) + " outside [1, " +
                            std::to_string(m_refs.size() == 0 ? 0 : m_refs.size() - 1) + "]");
  }
  if (mode == MemoryMode::kOverwrite) return m_refs[h - 1];
  return concat_rows(m_refs.first(h));
}

template <typename Scalar>
Tensor<Scalar> consistency_loss(std::span<const Tensor<Scalar>> m_refs, std::span<const Tensor<Scalar>> m_upds) {
  if (m_refs.size() != m_upds.size()) {
    throw std::invalid_argument("consistency_loss: " + std::to_string(m_refs.size()) + " references vs " +
                                std::to_string(m_upds.size()) + " updates");
  }
  if (m_refs.empty()) return Tensor<Scalar>::scalar(0);
  std::vector<Tensor<Scalar>> refs;
  for (std::size_t i = 0; i < m_refs.size(); ++i) {
    if (m_refs[i].shape() != m_upds[i].shape() || m_refs[i].shape() != m_refs[0].shape()) {
      throw ShapeError("consistency_loss: pair " + std::to_string(i) + " has shapes " + m_refs[i].shape_string() +
                       " and " + m_upds[i].shape_string());
    }
    refs.push_back(m_refs[i].detach());
  }
  // Equal-sized pairs: the mean of per-pair means is the overall element mean.
  return mse(concat_rows(std::span<const Tensor<Scalar>>(m_upds)), concat_rows(std::span<const Tensor<Scalar>>(refs)));
}

namespace {

/// Next-item targets of segment h: item i predicts item i+1, the last item
/// predicts the first item of the next segment.
std::vector<std::pair<Index, ItemId>> segment_targets(const SegmentedHistory& user, std::size_t h) {
  std::vector<std::pair<Index, ItemId>> out;
  const auto& seg = user.segments[h];
  for (std::size_t i = 0; i < seg.size(); ++i) {
    if (i + 1 < seg.size()) {
      out.emplace_back(static_cast<Index>(i), seg[i + 1]);
    } else if (h + 1 < user.size() && !user.segments[h + 1].empty()) {
      out.emplace_back(static_cast<Index>(i), user.segments[h + 1].front());
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> next_item_loss(const ModelParams<Scalar>& params, const Tensor<Scalar>& hidden,
                              const std::vector<Index>& rows, const std::vector<Index>& targets) {
  if (rows.empty()) return Tensor<Scalar>::scalar(0);
  const Tensor<Scalar> logits = item_logits(params, gather_rows(hidden, std::span<const Index>(rows)));
  return cross_entropy(logits, std::span<const Index>(targets));
}

/// Packed teacher-forced decodes [MEMORY; S_0..S_h] with memory rows taken
/// from `source`.
template <typename Scalar>
Tensor<Scalar> reconstruction_batch(const ModelParams<Scalar>& params, const Tensor<Scalar>& source,
                                    const std::vector<std::vector<Index>>& memory_rows,
                                    const std::vector<std::span<const std::vector<ItemId>>>& prefixes) {
  PackedBatch<Scalar> batch;
  batch.memory_source = source;
  std::vector<Index> rows, targets;
  for (std::size_t p = 0; p < prefixes.size(); ++p) {
    SequenceLayout layout;
    const auto n_mem = static_cast<Index>(memory_rows[p].size());
    if (n_mem < 1) throw std::invalid_argument("reconstruction_loss: empty memory");
    layout.append_memory(n_mem);
    std::vector<ItemId> flat;
    for (std::size_t j = 0; j < prefixes[p].size(); ++j) {
      layout.append_items(prefixes[p][j], static_cast<int>(j));
      flat.insert(flat.end(), prefixes[p][j].begin(), prefixes[p][j].end());
    }
    AttentionMask mask = build_causal_mask(layout);
    const Index base = batch.add(std::move(layout), std::move(mask), memory_rows[p]);
    // Slot base + n_mem - 1 + t predicts flat[t].
    for (std::size_t t = 0; t < flat.size(); ++t) {
      rows.push_back(base + n_mem - 1 + static_cast<Index>(t));
      targets.push_back(flat[t]);
    }
  }
  if (rows.empty()) return Tensor<Scalar>::scalar(0);
  return next_item_loss(params, forward_packed(params, batch), rows, targets);
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> reconstruction_loss(const ModelParams<Scalar>& params, const Tensor<Scalar>& m,
                                   std::span<const std::vector<ItemId>> prefix_segments) {
  std::vector<Index> rows(static_cast<std::size_t>(m.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  return reconstruction_batch<Scalar>(params, m, {rows}, {prefix_segments});
}

template <typename Scalar>
TrainStepOutput<Scalar> stage2_parallel_pass(const ModelParams<Scalar>& params,
                                             std::span<const SegmentedHistory> users,
                                             const ReferencePass<Scalar>& reference, const StageTwoOptions& opts) {
  if (reference.query_offset.size() != users.size()) {
    throw std::invalid_argument("stage2_parallel_pass: reference pass covers " +
                                std::to_string(reference.query_offset.size()) + " users, batch has " +
                                std::to_string(users.size()));
  }
  const int c = params.config.slots;
  const Index seg_len = params.config.context_len;

  struct Unit {
    std::size_t user, h;
    std::vector<std::pair<Index, ItemId>> targets;
    bool full = false;
    Index item_offset = 0;  // packed row of the first item
  };
  std::vector<Unit> units;
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (reference.query_offset[u].size() != users[u].size()) {
      throw std::invalid_argument("stage2_parallel_pass: " + std::to_string(reference.query_offset[u].size()) +
                                  " reference memories for " + std::to_string(users[u].size()) + " segments");
    }
    for (std::size_t h = 0; h < users[u].size(); ++h) {
      Unit unit{u, h, segment_targets(users[u], h),
                static_cast<Index>(users[u].segments[h].size()) == seg_len, 0};
      if (unit.targets.empty() && !unit.full) continue;
      units.push_back(std::move(unit));
    }
  }

  std::vector<std::size_t> order = opts.pack_order;
  if (order.empty()) {
    order.resize(units.size());
    std::iota(order.begin(), order.end(), 0);
  } else {
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i || sorted.size() != units.size()) {
        throw std::invalid_argument("stage2_parallel_pass: pack_order is not a permutation of the " +
                                    std::to_string(units.size()) + " stage-2 layouts");
      }
    }
  }

  PackedBatch<Scalar> batch;
  batch.memory_source = reference.hidden;
  for (std::size_t k : order) {
    Unit& unit = units[k];
    std::vector<Index> mem_rows;
    if (unit.h >= 1) mem_rows = reference.context_rows(unit.user, unit.h, opts.mode);
    const auto n_mem = static_cast<Index>(mem_rows.size());
    SequenceLayout layout = encode_layout(n_mem, users[unit.user].segments[unit.h], c, static_cast<int>(unit.h));
    AttentionMask mask = build_causal_mask(layout);
    unit.item_offset = batch.add(std::move(layout), std::move(mask), mem_rows) + n_mem;
  }
  const Tensor<Scalar> hidden = forward_packed(params, batch);

  TrainStepOutput<Scalar> out;
  std::vector<Index> rows, targets;
  std::vector<std::vector<Index>> recon_rows;
  std::vector<std::span<const std::vector<ItemId>>> recon_prefixes;
  for (const Unit& unit : units) {
    for (const auto& [i, t] : unit.targets) {
      rows.push_back(unit.item_offset + i);
      targets.push_back(t);
    }
    if (unit.full) {
      const Index q = unit.item_offset + seg_len;
      out.m_upd.push_back(slice_rows(hidden, q, c));
      out.m_ref.push_back(reference.m_ref(unit.user, unit.h));
      if (opts.recon_weight > 0.0) {
        std::vector<Index> r(static_cast<std::size_t>(c));
        std::iota(r.begin(), r.end(), q);
        recon_rows.push_back(std::move(r));
        recon_prefixes.push_back(std::span<const std::vector<ItemId>>(users[unit.user].segments).first(unit.h + 1));
      }
    }
  }
  out.n_targets = static_cast<Index>(rows.size());
  out.loss_ar = next_item_loss(params, hidden, rows, targets);
  out.loss_con = consistency_loss<Scalar>(out.m_ref, out.m_upd);
  out.loss_recon = opts.recon_weight > 0.0 && !recon_rows.empty()
                       ? reconstruction_batch(params, hidden, recon_rows, recon_prefixes)
                       : Tensor<Scalar>::scalar(0);
  out.loss_total = out.loss_ar + static_cast<Scalar>(opts.consistency_weight) * out.loss_con;
  if (opts.recon_weight > 0.0) out.loss_total = out.loss_total + static_cast<Scalar>(opts.recon_weight) * out.loss_recon;
  return out;
}

template <typename Scalar>
TrainStepOutput<Scalar> stage2_parallel_pass(const ModelParams<Scalar>& params, const SegmentedHistory& user,
                                             std::span<const Tensor<Scalar>> m_refs, const StageTwoOptions& opts) {
  if (m_refs.size() != user.size()) {
    throw std::invalid_argument("stage2_parallel_pass: " + std::to_string(m_refs.size()) + " reference memories for " +
                                std::to_string(user.size()) + " segments");
  }
  ReferencePass<Scalar> ref;
  ref.slots = params.config.slots;
  ref.hidden = concat_rows(m_refs);
  ref.query_offset.emplace_back();
  for (std::size_t h = 0; h < m_refs.size(); ++h) ref.query_offset[0].push_back(static_cast<Index>(h) * ref.slots);
  return stage2_parallel_pass(params, std::span<const SegmentedHistory>(&user, 1), ref, opts);
}

template <typename Scalar>
SerialPassOutput<Scalar> serial_unrolled_pass(const ModelParams<Scalar>& params,
                                              std::span<const SegmentedHistory> users, MemoryMode mode) {
  const int c = params.config.slots;
  const Index seg_len = params.config.context_len;
  std::size_t max_segments = 0;
  for (const auto& u : users) max_segments = std::max(max_segments, u.size());

  SerialPassOutput<Scalar> out;
  std::vector<Tensor<Scalar>> memory(users.size());
  std::vector<std::pair<Tensor<Scalar>, Index>> weighted;
  for (std::size_t h = 0; h < max_segments; ++h) {
    PackedBatch<Scalar> batch;
    std::vector<Tensor<Scalar>> sources;
    Index source_rows = 0;
    std::vector<std::pair<std::size_t, Index>> queries;  // (user, packed query row)
    std::vector<Index> rows, targets;
    for (std::size_t u = 0; u < users.size(); ++u) {
      if (h >= users[u].size()) continue;
      std::vector<Index> mem_rows;
      if (memory[u].defined()) {
        for (Index r = 0; r < memory[u].rows(); ++r) mem_rows.push_back(source_rows + r);
        source_rows += memory[u].rows();
        sources.push_back(memory[u]);
      }
      const auto n_mem = static_cast<Index>(mem_rows.size());
      const auto& seg = users[u].segments[h];
      SequenceLayout layout = encode_layout(n_mem, seg, c, static_cast<int>(h));
      AttentionMask mask = build_causal_mask(layout);
      const Index items = batch.add(std::move(layout), std::move(mask), mem_rows) + n_mem;
      for (const auto& [i, t] : segment_targets(users[u], h)) {
        rows.push_back(items + i);
        targets.push_back(t);
      }
      if (static_cast<Index>(seg.size()) == seg_len) queries.emplace_back(u, items + seg_len);
    }
    if (!sources.empty()) batch.memory_source = concat_rows(std::span<const Tensor<Scalar>>(sources));
    const Tensor<Scalar> inputs = embed_packed(params, batch);
    const auto blocks = batch.blocks();
    const Tensor<Scalar> hidden = transformer_forward(params, inputs, std::span<const AttentionBlock>(blocks));
    const Tensor<Scalar> loss = next_item_loss(params, hidden, rows, targets);
    out.segment_inputs.push_back(inputs);
    out.segment_losses.push_back(loss);
    if (!rows.empty()) weighted.emplace_back(loss, static_cast<Index>(rows.size()));
    out.n_targets += static_cast<Index>(rows.size());
    // Stop-gradient between segments.
    for (const auto& [u, q] : queries) {
      Tensor<Scalar> m = slice_rows(hidden, q, c).detach();
      if (mode == MemoryMode::kAppend && memory[u].defined()) {
        const Tensor<Scalar> parts[] = {memory[u], m};
        memory[u] = concat_rows(std::span<const Tensor<Scalar>>(parts));
      } else {
        memory[u] = m;
      }
    }
  }
  if (weighted.empty()) {
    out.loss_total = Tensor<Scalar>::scalar(0);
    return out;
  }
  out.loss_total = static_cast<Scalar>(static_cast<double>(weighted[0].second) / static_cast<double>(out.n_targets)) *
                   weighted[0].first;
  for (std::size_t i = 1; i < weighted.size(); ++i) {
    const auto w = static_cast<Scalar>(static_cast<double>(weighted[i].second) / static_cast<double>(out.n_targets));
    out.loss_total = out.loss_total + w * weighted[i].first;
  }
  return out;
}

std::vector<PlainInstance> plain_instances(std::span<const ItemId> prefix, TrainerKind kind, Index window) {
  if (window < 1) throw std::invalid_argument("plain_instances: window must be >= 1");
  std::vector<PlainInstance> out;
  if (prefix.size() < 2) return out;
  const auto n_inputs = prefix.size() - 1;
  const auto w = static_cast<std::size_t>(window);
  switch (kind) {
    case TrainerKind::kPlainShort:
      for (std::size_t start = 0; start < n_inputs; start += w) {
        const std::size_t end = std::min(n_inputs, start + w);
        out.push_back({{prefix.begin() + static_cast<std::ptrdiff_t>(start), prefix.begin() + static_cast<std::ptrdiff_t>(end)},
                       {prefix.begin() + static_cast<std::ptrdiff_t>(start + 1), prefix.begin() + static_cast<std::ptrdiff_t>(end + 1)}});
      }
      break;
    case TrainerKind::kPlainFull: {
      const std::size_t start = n_inputs > w ? n_inputs - w : 0;
      out.push_back({{prefix.begin() + static_cast<std::ptrdiff_t>(start), prefix.end() - 1},
                     {prefix.begin() + static_cast<std::ptrdiff_t>(start + 1), prefix.end()}});
      break;
    }
    default: throw std::invalid_argument("plain_instances: trainer " + to_string(kind) + " is not a plain model");
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> plain_loss(const ModelParams<Scalar>& params, std::span<const PlainInstance> instances) {
  PackedBatch<Scalar> batch;
  std::vector<Index> rows, targets;
  for (const auto& inst : instances) {
    if (inst.inputs.size() != inst.targets.size()) throw std::invalid_argument("plain_loss: ragged instance");
    SequenceLayout layout = decode_layout(0, inst.inputs);
    AttentionMask mask = build_causal_mask(layout);
    const Index base = batch.add(std::move(layout), std::move(mask));
    for (std::size_t i = 0; i < inst.targets.size(); ++i) {
      rows.push_back(base + static_cast<Index>(i));
      targets.push_back(inst.targets[i]);
    }
  }
  if (rows.empty()) return Tensor<Scalar>::scalar(0);
  return next_item_loss(params, forward_packed(params, batch), rows, targets);
}

std::vector<ItemId> training_prefix(const UserSequence& user, Index full_len) {
  const auto split = split_leave_one_out(user.items);
  const auto keep = std::min<std::size_t>(split.train.size(), static_cast<std::size_t>(full_len) + 1);
  return {split.train.end() - static_cast<std::ptrdiff_t>(keep), split.train.end()};
}

std::string EpochLog::to_json() const {
  nlohmann::json j = {{"epoch", epoch},         {"loss_total", loss_total}, {"loss_ar", loss_ar},
                      {"loss_con", loss_con},   {"loss_recon", loss_recon}, {"valid_h10", valid_h10},
                      {"valid_con_mse", valid_con_mse}, {"seconds", seconds}};
  return j.dump();
}

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::int64_t kConLogUsers = 256;

struct StepLosses {
  TensorF total;
  double ar = 0.0, con = 0.0, recon = 0.0;
};

struct PreparedUser {
  std::size_t index = 0;
  std::vector<ItemId> prefix;
  SegmentedHistory history;
  std::vector<PlainInstance> instances;
};

std::string batch_users(const Dataset& dataset, std::span<const PreparedUser* const> batch) {
  std::string s;
  for (const auto* p : batch) {
    if (!s.empty()) s += ",";
    s += dataset.users[p->index].user_id;
  }
  return s;
}

Protocol validation_protocol(TrainerKind kind) {
  switch (kind) {
    case TrainerKind::kPlainShort: return Protocol::kShort;
    case TrainerKind::kPlainFull: return Protocol::kFull;
    default: return Protocol::kMemIterative;
  }
}

TrainResult train_loop(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log) {
  dataset.validate();
  cfg.validate();
  const auto t_start = Clock::now();
  TrainResult result;
  ParamsF params = ParamsF::init(cfg.model_config(dataset.catalog_size), cfg.seed);
  result.params = params.clone();
  if (cfg.epochs == 0) return result;

  std::vector<PreparedUser> prepared;
  for (std::size_t u = 0; u < dataset.users.size(); ++u) {
    PreparedUser p;
    p.index = u;
    p.prefix = training_prefix(dataset.users[u], cfg.full_len);
    if (p.prefix.size() < 2) continue;
    if (is_memory_trainer(cfg.trainer)) {
      p.history = segment(p.prefix, cfg.segment_len);
    } else {
      p.instances = plain_instances(p.prefix, cfg.trainer, params.config.context_len);
    }
    prepared.push_back(std::move(p));
  }
  if (prepared.empty()) throw std::invalid_argument("train: no user has a training prefix with a target");

  std::vector<TensorF> tensors;
  std::vector<bool> decay;
  for (const auto& nt : params.named_tensors()) {
    // Plain models never read the memory tables.
    if (!params.config.memory && (nt.name == "memory_queries" || nt.name == "slot_embeddings")) continue;
    tensors.push_back(nt.tensor);
    decay.push_back(nt.decay);
  }
  AdamWOptions adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  AdamW<float> optimizer(tensors, decay, adam);

  StageTwoOptions s2;
  s2.consistency_weight = cfg.consistency_weight;
  s2.recon_weight = cfg.recon_weight;
  s2.mode = cfg.mode;

  auto step_losses = [&](std::span<const PreparedUser* const> batch) {
    StepLosses out;
    if (cfg.trainer == TrainerKind::kRec2PM) {
      std::vector<SegmentedHistory> hist;
      for (const auto* p : batch) hist.push_back(p->history);
      const auto ref = stage1_reference_pass(params, std::span<const SegmentedHistory>(hist));
      const auto step = stage2_parallel_pass(params, std::span<const SegmentedHistory>(hist), ref, s2);
      out.total = step.loss_total;
      out.ar = step.loss_ar.item();
      out.con = step.loss_con.item();
      out.recon = step.loss_recon.item();
    } else if (cfg.trainer == TrainerKind::kTokSerial) {
      std::vector<SegmentedHistory> hist;
      for (const auto* p : batch) hist.push_back(p->history);
      const auto step = serial_unrolled_pass(params, std::span<const SegmentedHistory>(hist), cfg.mode);
      out.total = step.loss_total;
      out.ar = step.loss_total.item();
    } else {
      std::vector<PlainInstance> inst;
      for (const auto* p : batch) inst.insert(inst.end(), p->instances.begin(), p->instances.end());
      out.total = plain_loss(params, std::span<const PlainInstance>(inst));
      out.ar = out.total.item();
    }
    return out;
  };

  EvalOptions eval_opts;
  eval_opts.mode = cfg.mode;
  eval_opts.full_len = cfg.full_len;
  eval_opts.target = EvalTarget::kValid;
  eval_opts.max_users = cfg.valid_users;
  const Protocol protocol = validation_protocol(cfg.trainer);

  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 17);
  std::vector<const PreparedUser*> order;
  for (const auto& p : prepared) order.push_back(&p);
  result.best_valid_h10 = -1.0;
  int since_best = 0;
  ParamsF best = params.clone();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog entry;
    entry.epoch = epoch;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const PreparedUser* const> batch(order.data() + start, end - start);
      StepLosses losses;
      try {
        losses = step_losses(batch);
        const float total = losses.total.item();
        if (!std::isfinite(total)) throw NumericError("non-finite loss " + std::to_string(total));
        optimizer.zero_grad();
        losses.total.backward();
        optimizer.step();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(n_batches) + " (users " + batch_users(dataset, batch) +
                           ", loss_ar " + std::to_string(losses.ar) + ", loss_con " + std::to_string(losses.con) +
                           "): " + e.what());
      }
      entry.loss_total += losses.total.item();
      entry.loss_ar += losses.ar;
      entry.loss_con += losses.con;
      entry.loss_recon += losses.recon;
      ++n_batches;
    }
    const double nb = static_cast<double>(n_batches);
    entry.loss_total /= nb;
    entry.loss_ar /= nb;
    entry.loss_con /= nb;
    entry.loss_recon /= nb;
    entry.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    entry.valid_h10 = evaluate(params, dataset, protocol, eval_opts).at("H@10");
    if (params.config.memory) {
      // Logged only; a fixed user sample keeps it from rivaling the epoch itself.
      const std::int64_t n = cfg.valid_users > 0 ? std::min<std::int64_t>(cfg.valid_users, kConLogUsers) : kConLogUsers;
      entry.valid_con_mse = mean_consistency_mse(params, dataset, cfg, n);
    }
    result.log.push_back(entry);
    if (log != nullptr) *log << entry.to_json() << '\n' << std::flush;

    if (entry.valid_h10 > result.best_valid_h10) {
      result.best_valid_h10 = entry.valid_h10;
      result.best_epoch = epoch;
      best = params.clone();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  result.params = std::move(best);
  result.seconds = std::chrono::duration<double>(Clock::now() - t_start).count();
  return result;
}

void require_kind(const TrainConfig& cfg, std::initializer_list<TrainerKind> kinds, const char* who) {
  for (auto k : kinds) {
    if (cfg.trainer == k) return;
  }
  throw std::invalid_argument(std::string(who) + ": trainer kind " + to_string(cfg.trainer) + " not handled here");
}

}  // namespace

TrainResult train_rec2pm(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log) {
  require_kind(cfg, {TrainerKind::kRec2PM}, "train_rec2pm");
  return train_loop(dataset, cfg, log);
}

TrainResult train_serial_baseline(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log) {
  require_kind(cfg, {TrainerKind::kTokSerial}, "train_serial_baseline");
  return train_loop(dataset, cfg, log);
}

TrainResult train_plain(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log) {
  require_kind(cfg, {TrainerKind::kPlainShort, TrainerKind::kPlainFull}, "train_plain");
  return train_loop(dataset, cfg, log);
}

TrainResult train(const Dataset& dataset, const TrainConfig& cfg, std::ostream* log) {
  switch (cfg.trainer) {
    case TrainerKind::kRec2PM: return train_rec2pm(dataset, cfg, log);
    case TrainerKind::kTokSerial: return train_serial_baseline(dataset, cfg, log);
    default: return train_plain(dataset, cfg, log);
  }
}

double mean_consistency_mse(const ParamsF& params, const Dataset& dataset, const TrainConfig& cfg,
                            std::int64_t max_users) {
  if (!params.config.memory) throw std::invalid_argument("mean_consistency_mse: params belong to a plain model");
  NoGradGuard no_grad;
  const std::size_t n = max_users > 0 ? std::min(dataset.users.size(), static_cast<std::size_t>(max_users))
                                      : dataset.users.size();
  StageTwoOptions opts;
  opts.mode = cfg.mode;
  double total = 0.0;
  std::size_t pairs = 0;
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < n; start += kChunk) {
    std::vector<SegmentedHistory> hist;
    for (std::size_t u = start; u < std::min(n, start + kChunk); ++u) {
      auto prefix = training_prefix(dataset.users[u], cfg.full_len);
      if (prefix.size() >= 2) hist.push_back(segment(prefix, params.config.context_len));
    }
    if (hist.empty()) continue;
    const auto ref = stage1_reference_pass(params, std::span<const SegmentedHistory>(hist));
    const auto out = stage2_parallel_pass(params, std::span<const SegmentedHistory>(hist), ref, opts);
    total += out.loss_con.item() * static_cast<double>(out.m_upd.size());
    pairs += out.m_upd.size();
  }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

#define PREFMEM_INSTANTIATE_TRAINING(S)                                                                              \
  template struct ReferencePass<S>;                                                                                 \
  template ReferencePass<S> stage1_reference_pass(const ModelParams<S>&, std::span<const SegmentedHistory>);       \
  template std::vector<Tensor<S>> stage1_reference_pass(const ModelParams<S>&, const SegmentedHistory&);           \
  template Tensor<S> build_reference_context(std::span<const Tensor<S>>, std::size_t, MemoryMode);                 \
  template TrainStepOutput<S> stage2_parallel_pass(const ModelParams<S>&, std::span<const SegmentedHistory>,       \
                                                   const ReferencePass<S>&, const StageTwoOptions&);               \
  template TrainStepOutput<S> stage2_parallel_pass(const ModelParams<S>&, const SegmentedHistory&,                 \
                                                   std::span<const Tensor<S>>, const StageTwoOptions&);            \
  template Tensor<S> consistency_loss(std::span<const Tensor<S>>, std::span<const Tensor<S>>);                     \
  template Tensor<S> reconstruction_loss(const ModelParams<S>&, const Tensor<S>&,                                  \
                                         std::span<const std::vector<ItemId>>);                                    \
  template SerialPassOutput<S> serial_unrolled_pass(const ModelParams<S>&, std::span<const SegmentedHistory>,      \
                                                    MemoryMode);                                                   \
  template Tensor<S> plain_loss(const ModelParams<S>&, std::span<const PlainInstance>);

PREFMEM_INSTANTIATE_TRAINING(float)
PREFMEM_INSTANTIATE_TRAINING(double)

}  // namespace prefmem
