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
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefmem/backbone.hpp"

namespace prefmem {

enum class ParamsFileErrorKind { kIo, kTruncated, kBadMagic, kBadVersion, kBadCrc, kShapeMismatch };

class ParamsFileError : public std::runtime_error {
 public:
  ParamsFileError(ParamsFileErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ParamsFileErrorKind kind() const { return kind_; }

 private:
  ParamsFileErrorKind kind_;
};

inline constexpr std::uint32_t kParamsFormatVersion = 1;
inline constexpr std::size_t kParamsHeaderBytes = 20;  // magic + version + config hash + tensor count
inline constexpr std::size_t kParamsTrailerBytes = 4;  // CRC32 of everything before it

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// FNV-1a over the canonical JSON form of the config.
std::uint64_t config_hash(const ModelConfig& config);

/// Little-endian "R2PW": magic, u32 version, u64 config hash, u32 tensor
/// count, then per tensor u32 name length, name, u32 rank, rank × u64 dims and
/// the f32 payload; finally a CRC32 of all preceding bytes.
std::vector<std::uint8_t> serialize_params(const ParamsF& params);

/// Tensors must match the layout implied by `expected` exactly; a differing
/// config hash alone only produces a warning on `warnings`.
ParamsF deserialize_params(std::span<const std::uint8_t> bytes, const ModelConfig& expected,
                           std::ostream* warnings = nullptr);

void save_params(const ParamsF& params, const std::filesystem::path& path);
ParamsF load_params(const std::filesystem::path& path, const ModelConfig& expected, std::ostream* warnings = nullptr);

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace prefmem
