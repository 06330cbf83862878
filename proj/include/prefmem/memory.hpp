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
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefmem/backbone.hpp"

namespace prefmem {

enum class MemoryMode : std::uint8_t { kOverwrite = 0, kAppend = 1 };

std::string to_string(MemoryMode mode);
MemoryMode memory_mode_from_string(const std::string& name);

/// A user's persisted preference memory.
///
/// OVERWRITE keeps exactly C rows; APPEND keeps segments_absorbed·C rows with
/// earlier atoms never rewritten.
struct MemoryState {
  MemoryMode mode = MemoryMode::kOverwrite;
  int slots = 0;
  Index dim = 0;
  MatrixF content;
  std::uint32_t segments_absorbed = 0;
  std::string user_id;

  Index rows() const { return content.rows(); }
  void validate() const;
  bool operator==(const MemoryState& other) const;
};

/// Hidden rows at the trailing QUERY block after a causal forward of `layout`.
/// `memory_content` feeds the MEMORY slots, if any.
MatrixF encode_memory(const ParamsF& params, const SequenceLayout& layout, const MatrixF* memory_content = nullptr);

/// M_0 = m_0 = encode([S_0; Q]).
MemoryState init_memory(const ParamsF& params, std::span<const ItemId> first_segment, MemoryMode mode,
                        std::string user_id = {});

/// m_k = encode([M_{k-1}; S_k; Q]); the segment must be full.
MemoryState update_memory(const ParamsF& params, const MemoryState& memory, std::span<const ItemId> segment);

enum class MemoryFileErrorKind { kIo, kTruncated, kBadMagic, kBadVersion, kBadCrc, kInvalid };

class MemoryFileError : public std::runtime_error {
 public:
  MemoryFileError(MemoryFileErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  MemoryFileErrorKind kind() const { return kind_; }

 private:
  MemoryFileErrorKind kind_;
};

inline constexpr std::uint8_t kMemoryFormatVersion = 1;
inline constexpr std::size_t kMemoryHeaderBytes = 18;  // magic + version + mode + C + d + segments + rows
inline constexpr std::size_t kMemoryTrailerBytes = 4;  // CRC32 of the float payload

/// Little-endian "R2PM" encoding.
std::vector<std::uint8_t> serialize_memory(const MemoryState& memory);
MemoryState deserialize_memory(std::span<const std::uint8_t> bytes);

void save_memory(const MemoryState& memory, const std::filesystem::path& path);
MemoryState load_memory(const std::filesystem::path& path);

/// Bytes of the persisted float payload for a token memory.
std::uint64_t memory_payload_bytes(int slots, Index dim, std::uint64_t segments, MemoryMode mode);
/// Whole "R2PM" file size: header + payload + CRC.
std::uint64_t memory_file_bytes(int slots, Index dim, std::uint64_t segments, MemoryMode mode);
/// Per-user footprint of persisting per-layer key/value caches for the same
/// C slots: 2 · n_layers · C · d · 4 bytes per segment kept.
std::uint64_t kv_footprint_bytes(int slots, Index dim, int n_layers, std::uint64_t segments, MemoryMode mode);

}  // namespace prefmem
