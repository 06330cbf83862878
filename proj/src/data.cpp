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

#include "prefmem/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

namespace prefmem {

void Dataset::validate() const {
  for (const auto& u : users) {
    if (u.items.size() < 3) {
      throw std::invalid_argument("Dataset: user '" + u.user_id + "' has " + std::to_string(u.items.size()) +
                                  " items, need at least 3");
    }
    for (ItemId i : u.items) {
      if (i < 0 || i >= catalog_size) {
        throw std::out_of_range("Dataset: user '" + u.user_id + "' has item " + std::to_string(i) +
                                " outside catalog of " + std::to_string(catalog_size));
      }
    }
    if (u.categories && u.categories->size() != u.items.size()) {
      throw std::invalid_argument("Dataset: user '" + u.user_id + "' categories do not align with items");
    }
  }
}

void SyntheticSpec::validate() const {
  if (n_users < 0 || seq_len < 3 || catalog_size < 1 || n_categories < 1 || n_categories > catalog_size) {
    throw std::invalid_argument("SyntheticSpec: need seq_len >= 3 and 1 <= n_categories <= catalog_size");
  }
  if (prefs_per_user < 1 || prefs_per_user > n_categories) {
    throw std::invalid_argument("SyntheticSpec: prefs_per_user must lie in [1, n_categories]");
  }
  if (long_term_weight < 0 || noise_rate < 0 || long_term_weight + noise_rate > 1.0 + 1e-12) {
    throw std::invalid_argument("SyntheticSpec: need long_term_weight, noise_rate >= 0 and their sum <= 1");
  }
  if (long_term_weight + noise_rate < 1.0 && session_burst_len < 1) {
    throw std::invalid_argument("SyntheticSpec: session_burst_len must be positive when bursts can occur");
  }
  if (item_zipf < 0) throw std::invalid_argument("SyntheticSpec: item_zipf must be non-negative");
}

int category_of(ItemId item, Index catalog_size, int n_categories) {
  // Categories are contiguous blocks; the first `extra` blocks hold one more item.
  const Index base = catalog_size / n_categories;
  const Index extra = catalog_size % n_categories;
  const Index boundary = extra * (base + 1);
  if (item < boundary) return static_cast<int>(item / (base + 1));
  return static_cast<int>(extra + (item - boundary) / base);
}

namespace {

std::vector<ItemId> category_items(int category, Index catalog_size, int n_categories) {
  const Index base = catalog_size / n_categories;
  const Index extra = catalog_size % n_categories;
  const Index start = category < extra ? category * (base + 1) : extra * (base + 1) + (category - extra) * base;
  const Index len = category < extra ? base + 1 : base;
  std::vector<ItemId> out(static_cast<std::size_t>(len));
  std::iota(out.begin(), out.end(), static_cast<ItemId>(start));
  return out;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<ItemId> any_item(0, static_cast<ItemId>(spec.catalog_size - 1));

  Dataset ds;
  ds.catalog_size = spec.catalog_size;
  ds.users.reserve(static_cast<std::size_t>(spec.n_users));

  std::vector<int> all_categories(static_cast<std::size_t>(spec.n_categories));
  std::iota(all_categories.begin(), all_categories.end(), 0);

  for (std::int64_t u = 0; u < spec.n_users; ++u) {
    std::shuffle(all_categories.begin(), all_categories.end(), rng);
    std::vector<std::vector<ItemId>> preferred;
    std::vector<std::discrete_distribution<std::size_t>> rank_dist;
    for (int p = 0; p < spec.prefs_per_user; ++p) {
      auto items = category_items(all_categories[static_cast<std::size_t>(p)], spec.catalog_size, spec.n_categories);
      std::shuffle(items.begin(), items.end(), rng);
      std::vector<double> w(items.size());
      for (std::size_t r = 0; r < w.size(); ++r) w[r] = std::pow(static_cast<double>(r + 1), -spec.item_zipf);
      rank_dist.emplace_back(w.begin(), w.end());
      preferred.push_back(std::move(items));
    }
    std::uniform_int_distribution<int> pick_pref(0, spec.prefs_per_user - 1);

    const int burst_len = std::max(1, spec.session_burst_len);
    std::vector<ItemId> burst(static_cast<std::size_t>(burst_len));
    auto redraw_burst = [&] {
      for (auto& b : burst) b = any_item(rng);
    };
    redraw_burst();
    int burst_pos = 0;
    int burst_emitted = 0;

    UserSequence seq;
    seq.user_id = "u" + std::to_string(u);
    seq.items.reserve(static_cast<std::size_t>(spec.seq_len));
    std::vector<int> cats;
    cats.reserve(static_cast<std::size_t>(spec.seq_len));
    for (std::int64_t t = 0; t < spec.seq_len; ++t) {
      const double r = unit(rng);
      ItemId item;
      if (r < spec.long_term_weight) {
        const auto p = static_cast<std::size_t>(pick_pref(rng));
        item = preferred[p][rank_dist[p](rng)];
      } else if (r < spec.long_term_weight + spec.noise_rate) {
        item = any_item(rng);
      } else {
        item = burst[static_cast<std::size_t>(burst_pos)];
        burst_pos = (burst_pos + 1) % burst_len;
        if (++burst_emitted == burst_len * burst_len) {
          redraw_burst();
          burst_emitted = 0;
          burst_pos = 0;
        }
      }
      seq.items.push_back(item);
      cats.push_back(category_of(item, spec.catalog_size, spec.n_categories));
    }
    seq.categories = std::move(cats);
    ds.users.push_back(std::move(seq));
  }
  return ds;
}

DatasetFormatError::DatasetFormatError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

Dataset load_dataset(const std::filesystem::path& path, std::optional<Index> catalog_size) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());
  Dataset ds;
  Index max_item = -1;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetFormatError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("user") || !j["user"].is_string() || !j.contains("items") ||
        !j["items"].is_array()) {
      throw DatasetFormatError(line_no, "expected {\"user\": string, \"items\": [int...]}");
    }
    UserSequence u;
    u.user_id = j["user"].get<std::string>();
    for (const auto& v : j["items"]) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw DatasetFormatError(line_no, "items must be non-negative integers");
      }
      u.items.push_back(v.get<ItemId>());
      max_item = std::max<Index>(max_item, u.items.back());
    }
    if (u.items.size() < 3) throw DatasetFormatError(line_no, "sequence shorter than 3 items");
    if (j.contains("cats") && !j["cats"].is_null()) {
      if (!j["cats"].is_array() || j["cats"].size() != u.items.size()) {
        throw DatasetFormatError(line_no, "\"cats\" must be an integer array aligned with \"items\"");
      }
      std::vector<int> cats;
      for (const auto& v : j["cats"]) {
        if (!v.is_number_integer()) throw DatasetFormatError(line_no, "\"cats\" must hold integers");
        cats.push_back(v.get<int>());
      }
      u.categories = std::move(cats);
    }
    ds.users.push_back(std::move(u));
  }
  ds.catalog_size = catalog_size.value_or(max_item + 1);
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path.string());
  for (const auto& u : dataset.users) {
    nlohmann::json j;
    j["user"] = u.user_id;
    j["items"] = u.items;
    if (u.categories) j["cats"] = *u.categories;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

LeaveOneOutSplit split_leave_one_out(std::span<const ItemId> sequence) {
  if (sequence.size() < 3) {
    throw std::invalid_argument("split_leave_one_out: need at least 3 items, got " + std::to_string(sequence.size()));
  }
  const std::size_t n = sequence.size();
  return {std::vector<ItemId>(sequence.begin(), sequence.begin() + static_cast<std::ptrdiff_t>(n - 2)),
          sequence[n - 2], sequence[n - 1]};
}

std::vector<ItemId> SegmentedHistory::flatten() const {
  std::vector<ItemId> out;
  for (const auto& s : segments) out.insert(out.end(), s.begin(), s.end());
  return out;
}

SegmentedHistory segment(std::span<const ItemId> sequence, Index segment_len) {
  if (segment_len < 1) throw std::invalid_argument("segment: segment length must be >= 1");
  SegmentedHistory out;
  const auto len = static_cast<std::size_t>(segment_len);
  for (std::size_t start = 0; start < sequence.size(); start += len) {
    const std::size_t end = std::min(sequence.size(), start + len);
    out.segments.emplace_back(sequence.begin() + static_cast<std::ptrdiff_t>(start),
                              sequence.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Dataset filter_and_truncate(const Dataset& dataset, std::size_t min_len) {
  Dataset out;
  out.catalog_size = dataset.catalog_size;
  for (const auto& u : dataset.users) {
    if (u.items.size() < min_len) continue;
    UserSequence t;
    t.user_id = u.user_id;
    const auto skip = static_cast<std::ptrdiff_t>(u.items.size() - min_len);
    t.items.assign(u.items.begin() + skip, u.items.end());
    if (u.categories) t.categories = std::vector<int>(u.categories->begin() + skip, u.categories->end());
    out.users.push_back(std::move(t));
  }
  return out;
}

}  // namespace prefmem
