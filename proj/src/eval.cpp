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

#include "prefmem/eval.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace prefmem {

std::string to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::kShort: return "short";
    case Protocol::kFull: return "full";
    case Protocol::kMemIterative: return "mem-iterative";
    case Protocol::kMemOneOff: return "mem-oneoff";
    case Protocol::kMemOverlap: return "mem-overlap";
  }
  return "unknown";
}

Protocol protocol_from_string(const std::string& name) {
  for (auto p : {Protocol::kShort, Protocol::kFull, Protocol::kMemIterative, Protocol::kMemOneOff,
                 Protocol::kMemOverlap}) {
    if (to_string(p) == name) return p;
  }
  throw std::invalid_argument("unknown protocol '" + name +
                              "' (expected short, full, mem-iterative, mem-oneoff or mem-overlap)");
}

bool is_memory_protocol(Protocol protocol) {
  return protocol == Protocol::kMemIterative || protocol == Protocol::kMemOneOff || protocol == Protocol::kMemOverlap;
}

int hit_at_k(Index rank, Index k) {
  if (rank < 1) throw std::invalid_argument("hit_at_k: rank must be >= 1");
  return rank <= k ? 1 : 0;
}

double ndcg_at_k(Index rank, Index k) {
  if (rank < 1) throw std::invalid_argument("ndcg_at_k: rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

Index rank_of(std::span<const float> scores, ItemId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size()) {
    throw std::out_of_range("rank_of: target " + std::to_string(target) + " outside catalog of " +
                            std::to_string(scores.size()));
  }
  const float s = scores[static_cast<std::size_t>(target)];
  Index rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > s || (scores[i] == s && static_cast<ItemId>(i) < target)) ++rank;
  }
  return rank;
}

void EvalReport::check_invariants() const {
  for (const auto& [k, v] : metrics) {
    if (!(v >= 0.0 && v <= 100.0)) throw std::logic_error("EvalReport: " + k + " = " + std::to_string(v) + " out of range");
  }
  constexpr double kSlack = 1e-9;
  if (at("H@1") > at("H@10") + kSlack || at("H@10") > at("H@50") + kSlack) {
    throw std::logic_error("EvalReport: H@K not monotone in K");
  }
  if (at("N@10") > at("H@10") + kSlack || at("N@50") > at("H@50") + kSlack) {
    throw std::logic_error("EvalReport: N@K exceeds H@K");
  }
}

nlohmann::json EvalReport::to_json() const {
  return {{"protocol", protocol}, {"n_users", n_users}, {"metrics", metrics}, {"seeds", seeds}};
}

std::vector<ItemId> protocol_context(const UserSequence& user, std::size_t target_index, Protocol protocol,
                                     Index context_len, Index full_len) {
  if (target_index > user.items.size() || target_index == 0) {
    throw std::out_of_range("protocol_context: target index " + std::to_string(target_index));
  }
  Index window = context_len;
  if (is_memory_protocol(protocol)) window = (full_len / context_len) * context_len - 1;
  const auto keep = std::min<std::size_t>(target_index, static_cast<std::size_t>(std::max<Index>(window, 1)));
  return {user.items.begin() + static_cast<std::ptrdiff_t>(target_index - keep),
          user.items.begin() + static_cast<std::ptrdiff_t>(target_index)};
}

EvalReport evaluate(const ParamsF& params, const Dataset& dataset, Protocol protocol, const EvalOptions& opts) {
  const bool mem = is_memory_protocol(protocol);
  if (mem != params.config.memory) {
    throw std::invalid_argument("evaluate: protocol " + to_string(protocol) + " needs a " +
                                (mem ? "memory" : "plain") + " model, got a " +
                                (params.config.memory ? "memory" : "plain") + " model");
  }
  if (dataset.catalog_size > params.config.catalog_size) {
    throw std::invalid_argument("evaluate: dataset catalog of " + std::to_string(dataset.catalog_size) +
                                " exceeds the model's " + std::to_string(params.config.catalog_size));
  }
  const Index seg = params.config.context_len;
  const std::size_t n = opts.max_users > 0 ? std::min(dataset.users.size(), static_cast<std::size_t>(opts.max_users))
                                           : dataset.users.size();
  double h1 = 0, h10 = 0, h50 = 0, n10 = 0, n50 = 0;
  for (std::size_t u = 0; u < n; ++u) {
    const auto& user = dataset.users[u];
    if (user.items.size() < 3) throw std::invalid_argument("evaluate: user " + user.user_id + " has < 3 items");
    const std::size_t target_index = user.items.size() - (opts.target == EvalTarget::kTest ? 1 : 2);
    const auto ctx = protocol_context(user, target_index, protocol, seg, opts.full_len);
    std::vector<float> scores;
    switch (protocol) {
      case Protocol::kShort:
      case Protocol::kFull: scores = score_plain(params, ctx); break;
      case Protocol::kMemIterative:
      case Protocol::kMemOverlap: {
        InferenceSession s(params, opts.mode, InferenceProtocol::kIterative,
                           protocol == Protocol::kMemOverlap ? seg / 4 : 0, user.user_id);
        s.ingest(ctx);
        scores = score_next(s);
        break;
      }
      case Protocol::kMemOneOff: {
        InferenceSession s(params, opts.mode, InferenceProtocol::kOneOff, 0, user.user_id);
        s.ingest(ctx);
        s.compress();
        scores = score_next(s);
        break;
      }
    }
    const Index rank = rank_of(scores, user.items[target_index]);
    h1 += hit_at_k(rank, 1);
    h10 += hit_at_k(rank, 10);
    h50 += hit_at_k(rank, 50);
    n10 += ndcg_at_k(rank, 10);
    n50 += ndcg_at_k(rank, 50);
  }
  EvalReport r;
  r.protocol = to_string(protocol);
  r.n_users = static_cast<std::int64_t>(n);
  const double scale = n == 0 ? 0.0 : 100.0 / static_cast<double>(n);
  r.metrics = {{"H@1", h1 * scale}, {"H@10", h10 * scale}, {"H@50", h50 * scale},
               {"N@10", n10 * scale}, {"N@50", n50 * scale}};
  return r;
}

EvalReport average_reports(std::span<const EvalReport> reports) {
  if (reports.empty()) throw std::invalid_argument("average_reports: nothing to average");
  EvalReport out;
  out.protocol = reports[0].protocol;
  out.n_users = reports[0].n_users;
  for (const auto& r : reports) {
    if (r.protocol != out.protocol) {
      throw std::invalid_argument("average_reports: mixed protocols " + out.protocol + " and " + r.protocol);
    }
    for (const auto& [k, v] : r.metrics) out.metrics[k] += v;
    out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
  }
  for (auto& [k, v] : out.metrics) v /= static_cast<double>(reports.size());
  return out;
}

nlohmann::json AblationRow::to_json() const {
  nlohmann::json j = {{"name", name},
                      {"consistency_weight", config.consistency_weight},
                      {"slots", config.slots},
                      {"recon_weight", config.recon_weight},
                      {"mode", to_string(config.mode)},
                      {"iterative", iterative.to_json()},
                      {"con_mse", con_mse}};
  if (!overlap.metrics.empty()) j["overlap"] = overlap.to_json();
  return j;
}

nlohmann::json ablation_table(std::span<const AblationRow> rows) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& r : rows) t.push_back(r.to_json());
  return t;
}

std::vector<AblationRow> run_ablation_suite(const Dataset& dataset, const TrainConfig& base,
                                            const AblationOptions& opts, std::ostream* progress) {
  if (opts.seeds.empty()) throw std::invalid_argument("run_ablation_suite: no seeds");
  TrainConfig memory_base = base;
  memory_base.trainer = TrainerKind::kRec2PM;

  struct Trained {
    TrainConfig cfg;
    std::vector<ParamsF> params;
  };
  std::vector<Trained> cache;
  auto trained = [&](const TrainConfig& cfg) -> const std::vector<ParamsF>& {
    for (const auto& t : cache) {
      if (t.cfg == cfg) return t.params;
    }
    Trained t{cfg, {}};
    for (auto seed : opts.seeds) {
      TrainConfig c = cfg;
      c.seed = seed;
      if (progress != nullptr) {
        *progress << "training lambda=" << c.consistency_weight << " C=" << c.slots << " recon=" << c.recon_weight
                  << " seed=" << seed << '\n' << std::flush;
      }
      t.params.push_back(train(dataset, c).params);
    }
    cache.push_back(std::move(t));
    return cache.back().params;
  };

  EvalOptions eval_opts;
  eval_opts.mode = memory_base.mode;
  eval_opts.full_len = memory_base.full_len;
  auto make_row = [&](std::string name, const TrainConfig& cfg, bool with_overlap) {
    AblationRow row;
    row.name = std::move(name);
    row.config = cfg;
    std::vector<EvalReport> it, ov;
    double mse_sum = 0.0;
    const auto& models = trained(cfg);
    for (std::size_t i = 0; i < models.size(); ++i) {
      it.push_back(evaluate(models[i], dataset, Protocol::kMemIterative, eval_opts));
      it.back().seeds = {opts.seeds[i]};
      if (with_overlap) {
        ov.push_back(evaluate(models[i], dataset, Protocol::kMemOverlap, eval_opts));
        ov.back().seeds = {opts.seeds[i]};
      }
      mse_sum += mean_consistency_mse(models[i], dataset, cfg, opts.con_mse_users);
    }
    row.iterative = average_reports(it);
    if (with_overlap) row.overlap = average_reports(ov);
    row.con_mse = mse_sum / static_cast<double>(models.size());
    return row;
  };

  std::vector<AblationRow> rows;
  TrainConfig with_con = memory_base;
  with_con.consistency_weight = 1.0;
  with_con.recon_weight = 0.0;
  TrainConfig without_con = with_con;
  without_con.consistency_weight = 0.0;
  rows.push_back(make_row("lambda=1", with_con, false));
  rows.push_back(make_row("lambda=0", without_con, false));
  for (int c : opts.slot_sweep) {
    TrainConfig cfg = with_con;
    cfg.slots = c;
    rows.push_back(make_row("slots=" + std::to_string(c), cfg, false));
  }
  TrainConfig recon = with_con;
  recon.recon_weight = opts.recon_weight;
  rows.push_back(make_row("recon_weight=0", with_con, false));
  rows.push_back(make_row("recon_weight=" + nlohmann::json(opts.recon_weight).dump(), recon, false));
  rows.push_back(make_row("overlap=" + std::to_string(with_con.segment_len / 4), with_con, true));
  return rows;
}

namespace {

const char* role_name(Role role) {
  switch (role) {
    case Role::kMemory: return "memory";
    case Role::kItem: return "item";
    case Role::kQuery: return "query";
  }
  return "unknown";
}

}  // namespace

std::string export_attention(const InferenceSession& session, const AttentionExportOptions& opts) {
  if (!session.has_encode()) throw std::invalid_argument("export_attention: session has not produced a memory yet");
  const auto& params = session.params();
  const SequenceLayout& layout = session.last_encode_layout();
  const MatrixF& memory = session.last_encode_memory();
  const bool has_memory = layout.count(Role::kMemory) > 0;

  NoGradGuard no_grad;
  TensorF mem;
  if (has_memory) mem = TensorF(memory);
  const TensorF x = embed_layout(params, layout, has_memory ? &mem : nullptr);
  const AttentionMask mask = has_memory ? build_causal_mask(layout) : build_stage1_mask(layout);
  AttentionTrace<float> trace;
  transformer_forward(params, x, mask, &trace);

  const int last_segment = layout.slots.back().segment;
  const auto queries = layout.query_positions(last_segment);
  const int heads = params.config.n_heads;

  std::ostringstream out;
  out << std::setprecision(9);
  if (opts.raw) {
    out << "layer,head,slot,target,weight,kind\n";
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
      for (int h = 0; h < heads; ++h) {
        const MatrixF& p = trace.layers[l][static_cast<std::size_t>(h)];
        for (std::size_t c = 0; c < queries.size(); ++c) {
          for (Index j = 0; j < layout.size(); ++j) {
            if (!mask(queries[c], j)) continue;
            out << l << ',' << h << ',' << c << ',' << j << ',' << p(queries[c], j) << ','
                << role_name(layout.slots[static_cast<std::size_t>(j)].role) << '\n';
          }
        }
      }
    }
    return out.str();
  }

  MatrixF mean = MatrixF::Zero(static_cast<Index>(queries.size()), layout.size());
  std::size_t n_maps = 0;
  for (const auto& layer : trace.layers) {
    for (int h = 0; h < heads; ++h) {
      const MatrixF& p = layer[static_cast<std::size_t>(h)];
      for (std::size_t c = 0; c < queries.size(); ++c) mean.row(static_cast<Index>(c)) += p.row(queries[c]);
      ++n_maps;
    }
  }
  if (n_maps > 0) mean /= static_cast<float>(n_maps);

  out << "slot,target,weight,kind\n";
  for (std::size_t c = 0; c < queries.size(); ++c) {
    for (Index j = 0; j < layout.size(); ++j) {
      if (!mask(queries[c], j)) continue;
      out << c << ',' << j << ',' << mean(static_cast<Index>(c), j) << ','
          << role_name(layout.slots[static_cast<std::size_t>(j)].role) << '\n';
    }
  }
  if (opts.n_categories > 0) {
    for (std::size_t c = 0; c < queries.size(); ++c) {
      std::vector<double> per_cat(static_cast<std::size_t>(opts.n_categories), 0.0);
      for (Index j = 0; j < layout.size(); ++j) {
        const Slot& s = layout.slots[static_cast<std::size_t>(j)];
        if (s.role != Role::kItem || !mask(queries[c], j)) continue;
        per_cat[static_cast<std::size_t>(category_of(s.item, params.config.catalog_size, opts.n_categories))] +=
            mean(static_cast<Index>(c), j);
      }
      for (std::size_t k = 0; k < per_cat.size(); ++k) out << c << ',' << k << ',' << per_cat[k] << ",category\n";
    }
  }
  return out.str();
}

}  // namespace prefmem
