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
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "prefmem/data.hpp"
#include "prefmem/eval.hpp"
#include "prefmem/training.hpp"

namespace prefmem {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalSettings {
  Protocol protocol = Protocol::kMemIterative;
  EvalTarget target = EvalTarget::kTest;
  std::int64_t max_users = 0;

  bool operator==(const EvalSettings&) const = default;
};

/// Everything one experiment needs. JSON form:
///   {"train": {...TrainConfig}, "synthetic": {...SyntheticSpec}, "eval": {...}}
/// Every section and key is optional; unknown keys are schema violations.
struct RunConfig {
  TrainConfig train;
  SyntheticSpec synthetic;
  EvalSettings eval;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  /// Sets one field from its JSON value, e.g. ("train", "slots", 8).
  void set(const std::string& section, const std::string& key, const nlohmann::json& value);
  void validate() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Per-run record written once at the end of a run.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::string> artifacts;
  nlohmann::json reports = nlohmann::json::object();
  std::string version;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// Atomic replace of `path`.
  void write(const std::filesystem::path& path) const;
};

RunManifest read_manifest(const std::filesystem::path& path);

std::string version_string();
/// UTC time in ISO-8601 with seconds.
std::string utc_timestamp();

}  // namespace prefmem
