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
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefmem/backbone.hpp"

namespace prefmem {

struct UserSequence {
  std::string user_id;
  std::vector<ItemId> items;
  std::optional<std::vector<int>> categories;

  bool operator==(const UserSequence&) const = default;
};

struct Dataset {
  Index catalog_size = 0;
  std::vector<UserSequence> users;

  /// Item ids inside the catalog, sequences of length >= 3, categories aligned.
  void validate() const;
  bool operator==(const Dataset&) const = default;
};

/// Parameters of the planted-preference stream generator.
///
/// Each user keeps `prefs_per_user` preferred categories for the whole stream.
/// Every step draws a preferred-category item with probability
/// `long_term_weight` (rank-Zipf over a per-user ordering of the category),
/// a uniform catalog item with probability `noise_rate`, and otherwise the
/// next item of a repeating session burst of `session_burst_len` items. A
/// burst is redrawn after it has cycled `session_burst_len` times.
struct SyntheticSpec {
  std::int64_t n_users = 2000;
  std::int64_t seq_len = 67;
  Index catalog_size = 500;
  int n_categories = 25;
  int prefs_per_user = 4;
  double long_term_weight = 0.5;
  int session_burst_len = 6;
  double noise_rate = 0.2;
  std::uint64_t seed = 0;
  double item_zipf = 1.5;

  void validate() const;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

/// Category of an item under the contiguous block layout used by the generator.
int category_of(ItemId item, Index catalog_size, int n_categories);

class DatasetFormatError : public std::runtime_error {
 public:
  DatasetFormatError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Line-delimited JSON: {"user": string, "items": [int...], "cats": [int...]?}.
/// The catalog size is max item id + 1 unless `catalog_size` is given.
Dataset load_dataset(const std::filesystem::path& path, std::optional<Index> catalog_size = std::nullopt);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

struct LeaveOneOutSplit {
  std::vector<ItemId> train;
  ItemId valid = -1;
  ItemId test = -1;
};

LeaveOneOutSplit split_leave_one_out(std::span<const ItemId> sequence);

struct SegmentedHistory {
  std::vector<std::vector<ItemId>> segments;

  std::size_t size() const { return segments.size(); }
  std::vector<ItemId> flatten() const;
};

/// Greedy left-to-right chunks of `segment_len`; only the last may be short.
SegmentedHistory segment(std::span<const ItemId> sequence, Index segment_len);

/// Keeps users with at least `min_len` interactions, each truncated to its most
/// recent `min_len` items.
Dataset filter_and_truncate(const Dataset& dataset, std::size_t min_len);

}  // namespace prefmem
