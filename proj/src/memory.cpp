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

#include "prefmem/memory.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bytes.hpp"

namespace prefmem {

std::string to_string(MemoryMode mode) { return mode == MemoryMode::kOverwrite ? "overwrite" : "append"; }

MemoryMode memory_mode_from_string(const std::string& name) {
  if (name == "overwrite" || name == "O") return MemoryMode::kOverwrite;
  if (name == "append" || name == "A") return MemoryMode::kAppend;
  throw std::invalid_argument("unknown memory mode '" + name + "' (expected overwrite or append)");
}

void MemoryState::validate() const {
  if (slots < 1 || dim < 1) throw std::invalid_argument("MemoryState: slots and dim must be positive");
  if (content.cols() != dim) throw std::invalid_argument("MemoryState: content width does not match dim");
  const Index expected = mode == MemoryMode::kOverwrite ? slots : static_cast<Index>(segments_absorbed) * slots;
  if (content.rows() != expected) {
    throw std::invalid_argument("MemoryState: " + to_string(mode) + " memory with " +
                                std::to_string(segments_absorbed) + " segments must hold " + std::to_string(expected) +
                                " rows, has " + std::to_string(content.rows()));
  }
  if (!content.allFinite()) throw NumericError("MemoryState: non-finite content");
}

bool MemoryState::operator==(const MemoryState& other) const {
  return mode == other.mode && slots == other.slots && dim == other.dim &&
         segments_absorbed == other.segments_absorbed && user_id == other.user_id &&
         content.rows() == other.content.rows() && content.cols() == other.content.cols() &&
         std::memcmp(content.data(), other.content.data(), sizeof(float) * static_cast<std::size_t>(content.size())) ==
             0;
}

MatrixF encode_memory(const ParamsF& params, const SequenceLayout& layout, const MatrixF* memory_content) {
  const int c = params.config.slots;
  if (layout.size() < c) throw std::invalid_argument("encode_memory: layout shorter than the query block");
  for (Index i = layout.size() - c; i < layout.size(); ++i) {
    const Slot& s = layout.slots[static_cast<std::size_t>(i)];
    if (s.role != Role::kQuery || s.within != i - (layout.size() - c)) {
      throw std::invalid_argument("encode_memory: layout must end with a QUERY block of C=" + std::to_string(c) +
                                  " slots");
    }
  }
  NoGradGuard no_grad;
  TensorF memory;
  if (memory_content != nullptr) memory = TensorF(*memory_content);
  const TensorF x = embed_layout(params, layout, memory_content != nullptr ? &memory : nullptr);
  const TensorF h = transformer_forward(params, x, build_causal_mask(layout));
  return h.value().bottomRows(c);
}

MemoryState init_memory(const ParamsF& params, std::span<const ItemId> first_segment, MemoryMode mode,
                        std::string user_id) {
  if (first_segment.empty()) throw std::invalid_argument("init_memory: empty first segment");
  MemoryState m;
  m.mode = mode;
  m.slots = params.config.slots;
  m.dim = params.config.dim;
  m.content = encode_memory(params, encode_layout(0, first_segment, m.slots));
  m.segments_absorbed = 1;
  m.user_id = std::move(user_id);
  return m;
}

MemoryState update_memory(const ParamsF& params, const MemoryState& memory, std::span<const ItemId> segment) {
  if (static_cast<Index>(segment.size()) != params.config.context_len) {
    throw std::invalid_argument("update_memory: segment has " + std::to_string(segment.size()) +
                                " items; updates fire only on full segments of " +
                                std::to_string(params.config.context_len));
  }
  if (memory.slots != params.config.slots || memory.dim != params.config.dim) {
    throw std::invalid_argument("update_memory: memory shape does not match the model");
  }
  const MatrixF m = encode_memory(params, encode_layout(memory.rows(), segment, memory.slots,
                                                        static_cast<int>(memory.segments_absorbed)),
                                  &memory.content);
  MemoryState next = memory;
  if (memory.mode == MemoryMode::kOverwrite) {
    next.content = m;
  } else {
    next.content.resize(memory.rows() + m.rows(), memory.dim);
    next.content.topRows(memory.rows()) = memory.content;
    next.content.bottomRows(m.rows()) = m;
  }
  ++next.segments_absorbed;
  return next;
}

namespace {

using detail::crc_of;
using detail::get_le;
using detail::put_le;

constexpr char kMagic[4] = {'R', '2', 'P', 'M'};

}  // namespace

std::vector<std::uint8_t> serialize_memory(const MemoryState& memory) {
  memory.validate();
  if (memory.slots > 0xFFFF || memory.dim > 0xFFFF) {
    throw std::invalid_argument("serialize_memory: C and d must fit in 16 bits");
  }
  std::vector<std::uint8_t> out;
  const std::size_t payload = sizeof(float) * static_cast<std::size_t>(memory.content.size());
  out.reserve(kMemoryHeaderBytes + payload + kMemoryTrailerBytes);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kMemoryFormatVersion);
  out.push_back(static_cast<std::uint8_t>(memory.mode));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(memory.slots));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(memory.dim));
  put_le<std::uint32_t>(out, memory.segments_absorbed);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(memory.rows()));
  const std::size_t payload_start = out.size();
  for (Index i = 0; i < memory.content.size(); ++i) {
    put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(memory.content.data()[i]));
  }
  put_le<std::uint32_t>(out, crc_of(out.data() + payload_start, payload));
  return out;
}

MemoryState deserialize_memory(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMemoryHeaderBytes + kMemoryTrailerBytes) {
    throw MemoryFileError(MemoryFileErrorKind::kTruncated, "memory file: truncated header");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw MemoryFileError(MemoryFileErrorKind::kBadMagic, "memory file: bad magic (expected R2PM)");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint8_t>(bytes, pos);
  if (version != kMemoryFormatVersion) {
    throw MemoryFileError(MemoryFileErrorKind::kBadVersion,
                          "memory file: unsupported version " + std::to_string(version));
  }
  const auto mode = get_le<std::uint8_t>(bytes, pos);
  if (mode > 1) throw MemoryFileError(MemoryFileErrorKind::kInvalid, "memory file: unknown mode byte");
  MemoryState m;
  m.mode = static_cast<MemoryMode>(mode);
  m.slots = get_le<std::uint16_t>(bytes, pos);
  m.dim = get_le<std::uint16_t>(bytes, pos);
  m.segments_absorbed = get_le<std::uint32_t>(bytes, pos);
  const auto rows = get_le<std::uint32_t>(bytes, pos);
  const std::uint64_t payload = std::uint64_t{rows} * static_cast<std::uint64_t>(m.dim) * sizeof(float);
  if (bytes.size() != kMemoryHeaderBytes + payload + kMemoryTrailerBytes) {
    throw MemoryFileError(MemoryFileErrorKind::kTruncated, "memory file: size does not match header");
  }
  const std::uint32_t crc = crc_of(bytes.data() + kMemoryHeaderBytes, static_cast<std::size_t>(payload));
  std::size_t crc_pos = kMemoryHeaderBytes + static_cast<std::size_t>(payload);
  if (get_le<std::uint32_t>(bytes, crc_pos) != crc) {
    throw MemoryFileError(MemoryFileErrorKind::kBadCrc, "memory file: CRC mismatch");
  }
  m.content.resize(rows, m.dim);
  for (Index i = 0; i < m.content.size(); ++i) {
    m.content.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos));
  }
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw MemoryFileError(MemoryFileErrorKind::kInvalid, std::string("memory file: ") + e.what());
  }
  return m;
}

void save_memory(const MemoryState& memory, const std::filesystem::path& path) {
  const auto bytes = serialize_memory(memory);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MemoryFileError(MemoryFileErrorKind::kIo, "memory file: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw MemoryFileError(MemoryFileErrorKind::kIo, "memory file: write failed for " + path.string());
}

MemoryState load_memory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MemoryFileError(MemoryFileErrorKind::kIo, "memory file: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_memory(bytes);
}

std::uint64_t memory_payload_bytes(int slots, Index dim, std::uint64_t segments, MemoryMode mode) {
  const std::uint64_t kept = mode == MemoryMode::kAppend ? segments : 1;
  return static_cast<std::uint64_t>(slots) * static_cast<std::uint64_t>(dim) * sizeof(float) * kept;
}

std::uint64_t memory_file_bytes(int slots, Index dim, std::uint64_t segments, MemoryMode mode) {
  return kMemoryHeaderBytes + memory_payload_bytes(slots, dim, segments, mode) + kMemoryTrailerBytes;
}

std::uint64_t kv_footprint_bytes(int slots, Index dim, int n_layers, std::uint64_t segments, MemoryMode mode) {
  return 2ULL * static_cast<std::uint64_t>(n_layers) * memory_payload_bytes(slots, dim, segments, mode);
}

}  // namespace prefmem
