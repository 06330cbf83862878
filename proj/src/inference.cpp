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

#include "prefmem/inference.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <stdexcept>

namespace prefmem {

InferenceSession::InferenceSession(const ParamsF& params, MemoryMode mode, InferenceProtocol protocol, Index overlap,
                                   std::string user_id)
    : params_(&params), mode_(mode), protocol_(protocol), overlap_(overlap), user_id_(std::move(user_id)) {
  if (overlap < 0 || overlap >= params.config.context_len) {
    throw std::invalid_argument("InferenceSession: overlap must lie in [0, L_seg), got " + std::to_string(overlap));
  }
  if (protocol == InferenceProtocol::kOneOff && overlap != 0) {
    throw std::invalid_argument("InferenceSession: overlap applies to iterative updates only");
  }
}

void InferenceSession::absorb_working() {
  const int c = params_->config.slots;
  if (!memory_) {
    last_layout_ = encode_layout(0, working_, c);
    last_memory_.resize(0, params_->config.dim);
    memory_ = init_memory(*params_, working_, mode_, user_id_);
  } else {
    last_layout_ = encode_layout(memory_->rows(), working_, c, static_cast<int>(memory_->segments_absorbed));
    last_memory_ = memory_->content;
    memory_ = update_memory(*params_, *memory_, working_);
  }
  working_.erase(working_.begin(), working_.end() - static_cast<std::ptrdiff_t>(overlap_));
}

void InferenceSession::ingest(ItemId item) {
  if (item < 0 || item >= params_->config.catalog_size) {
    throw std::out_of_range("InferenceSession::ingest: unknown item id " + std::to_string(item));
  }
  if (protocol_ == InferenceProtocol::kOneOff) {
    raw_.push_back(item);
    working_.push_back(item);
    return;
  }
  working_.push_back(item);
  if (static_cast<Index>(working_.size()) == params_->config.context_len) absorb_working();
}

void InferenceSession::ingest(std::span<const ItemId> items) {
  for (ItemId i : items) ingest(i);
}

void InferenceSession::compress() {
  if (protocol_ != InferenceProtocol::kOneOff) throw std::logic_error("compress: session is iterative");
  const Index seg = params_->config.context_len;
  const std::size_t full = raw_.size() / static_cast<std::size_t>(seg) * static_cast<std::size_t>(seg);
  if (full > 0) {
    std::span<const ItemId> prefix(raw_.data(), full);
    const auto segs = segment(prefix, seg);
    last_layout_ = global_layout(segs.segments, params_->config.slots);
    last_memory_.resize(0, params_->config.dim);
    memory_ = oneoff_compress(*params_, prefix, mode_, user_id_);
  }
  working_.assign(raw_.begin() + static_cast<std::ptrdiff_t>(full), raw_.end());
}

std::vector<float> score_next(const InferenceSession& session) {
  const auto& params = session.params();
  const auto& memory = session.memory();
  const Index mem_rows = memory ? memory->rows() : 0;
  if (mem_rows == 0 && session.working().empty()) {
    throw std::invalid_argument("predict_next: session has neither memory nor recent items");
  }
  NoGradGuard no_grad;
  const SequenceLayout layout = decode_layout(mem_rows, session.working());
  TensorF mem;
  if (mem_rows > 0) mem = TensorF(memory->content);
  const TensorF x = embed_layout(params, layout, mem_rows > 0 ? &mem : nullptr);
  const TensorF h = transformer_forward(params, x, build_causal_mask(layout));
  const TensorF logits = item_logits(params, slice_rows(h, h.rows() - 1, 1));
  return {logits.value().data(), logits.value().data() + logits.size()};
}

std::vector<float> score_plain(const ParamsF& params, std::span<const ItemId> context) {
  if (context.empty()) throw std::invalid_argument("score_plain: empty context");
  NoGradGuard no_grad;
  const SequenceLayout layout = decode_layout(0, context);
  const TensorF h = transformer_forward(params, embed_layout(params, layout), build_causal_mask(layout));
  const TensorF logits = item_logits(params, slice_rows(h, h.rows() - 1, 1));
  return {logits.value().data(), logits.value().data() + logits.size()};
}

Ranking rank_items(std::span<const float> scores) {
  Ranking r;
  r.items.resize(scores.size());
  std::iota(r.items.begin(), r.items.end(), 0);
  std::stable_sort(r.items.begin(), r.items.end(),
                   [&](ItemId a, ItemId b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  r.scores.reserve(scores.size());
  for (ItemId i : r.items) r.scores.push_back(scores[static_cast<std::size_t>(i)]);
  return r;
}

Ranking predict_next(const InferenceSession& session) { return rank_items(score_next(session)); }

MemoryState oneoff_compress(const ParamsF& params, std::span<const ItemId> prefix, MemoryMode mode,
                            std::string user_id) {
  const Index seg = params.config.context_len;
  if (static_cast<Index>(prefix.size()) < seg) {
    throw std::invalid_argument("oneoff_compress: prefix of " + std::to_string(prefix.size()) +
                                " items holds no full segment of " + std::to_string(seg));
  }
  const std::size_t full = prefix.size() / static_cast<std::size_t>(seg) * static_cast<std::size_t>(seg);
  const auto segs = segment(prefix.first(full), seg);
  const int c = params.config.slots;
  const SequenceLayout layout = global_layout(segs.segments, c);

  NoGradGuard no_grad;
  const TensorF h = transformer_forward(params, embed_layout(params, layout), build_stage1_mask(layout));
  MemoryState m;
  m.mode = mode;
  m.slots = c;
  m.dim = params.config.dim;
  m.segments_absorbed = static_cast<std::uint32_t>(segs.size());
  m.user_id = std::move(user_id);
  if (mode == MemoryMode::kOverwrite) {
    const auto rows = layout.query_positions(static_cast<int>(segs.size() - 1));
    m.content.resize(c, m.dim);
    for (int i = 0; i < c; ++i) m.content.row(i) = h.value().row(rows[static_cast<std::size_t>(i)]);
  } else {
    const auto rows = layout.positions(Role::kQuery);
    m.content.resize(static_cast<Index>(rows.size()), m.dim);
    for (std::size_t i = 0; i < rows.size(); ++i) m.content.row(static_cast<Index>(i)) = h.value().row(rows[i]);
  }
  m.validate();
  return m;
}

LatencyStats summarize_latency(std::vector<double> samples_ms) {
  LatencyStats s;
  s.samples = samples_ms.size();
  if (samples_ms.empty()) return s;
  std::sort(samples_ms.begin(), samples_ms.end());
  const std::size_t n = samples_ms.size();
  s.median_ms = n % 2 == 1 ? samples_ms[n / 2] : 0.5 * (samples_ms[n / 2 - 1] + samples_ms[n / 2]);
  const auto p95 = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1;
  s.p95_ms = samples_ms[std::min(p95, n - 1)];
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::span<const ItemId> tail(std::span<const ItemId> items, Index n) {
  const auto k = std::min<std::size_t>(items.size(), static_cast<std::size_t>(n));
  return items.last(k);
}

}  // namespace

std::vector<BenchReport> bench(const ParamsF& memory_params, const ParamsF* short_params, const ParamsF* full_params,
                               const Dataset& dataset, const BenchOptions& opts) {
  std::vector<BenchReport> out;
  if (opts.reps <= 0 || opts.n_users <= 0 || dataset.users.empty()) return out;
  const auto n_users = std::min<std::size_t>(dataset.users.size(), static_cast<std::size_t>(opts.n_users));

  auto plain = [&](const ParamsF& params, const std::string& name, Index window) {
    BenchReport r;
    r.protocol = name;
    r.context_items = window;
    std::vector<double> samples;
    for (std::size_t u = 0; u < n_users; ++u) {
      const auto ctx = tail(dataset.users[u].items, window);
      for (int rep = 0; rep < opts.reps; ++rep) {
        const auto t0 = Clock::now();
        auto scores = score_plain(params, ctx);
        samples.push_back(elapsed_ms(t0));
        if (scores.empty()) throw std::logic_error("bench: empty scores");
      }
    }
    r.predict = summarize_latency(std::move(samples));
    out.push_back(r);
  };
  if (short_params != nullptr) plain(*short_params, "short", opts.short_len);
  if (full_params != nullptr) plain(*full_params, "full", opts.full_len);

  BenchReport mem;
  mem.protocol = std::string("memory-") + to_string(opts.mode);
  std::vector<double> predict_samples, update_samples;
  std::uint64_t bytes = 0;
  for (std::size_t u = 0; u < n_users; ++u) {
    const auto ctx = tail(dataset.users[u].items, opts.full_len);
    mem.context_items = static_cast<Index>(ctx.size());
    InferenceSession session(memory_params, opts.mode);
    // Absorb all but the last segment's worth of items, then time the tail.
    const std::size_t seg = static_cast<std::size_t>(opts.segment_len);
    const std::size_t head = ctx.size() > seg ? ctx.size() - seg : 0;
    const std::size_t head_full = head / seg * seg;
    for (std::size_t i = 0; i < head_full; ++i) session.ingest(ctx[i]);
    if (session.memory()) {
      for (int rep = 0; rep < opts.reps; ++rep) {
        const auto t0 = Clock::now();
        auto next = update_memory(memory_params, *session.memory(), ctx.subspan(head_full - seg, seg));
        update_samples.push_back(elapsed_ms(t0));
        if (next.rows() == 0) throw std::logic_error("bench: empty memory");
      }
      bytes = serialize_memory(*session.memory()).size();
    }
    for (std::size_t i = head_full; i + 1 < ctx.size(); ++i) session.ingest(ctx[i]);
    for (int rep = 0; rep < opts.reps; ++rep) {
      const auto t0 = Clock::now();
      auto scores = score_next(session);
      predict_samples.push_back(elapsed_ms(t0));
      if (scores.empty()) throw std::logic_error("bench: empty scores");
    }
  }
  mem.predict = summarize_latency(std::move(predict_samples));
  mem.update = summarize_latency(std::move(update_samples));
  mem.bytes_per_user = bytes;
  out.push_back(mem);
  return out;
}

}  // namespace prefmem
