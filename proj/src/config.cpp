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

#include "prefmem/config.hpp"

#include <chrono>
#include <ctime>
#include <fstream>

#include "prefmem/params_io.hpp"

#ifndef PREFMEM_VERSION
#define PREFMEM_VERSION "0.0.0"
#endif

namespace prefmem {

using nlohmann::json;

namespace {

template <typename T>
T typed(const std::string& where, const json& v) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: " + where + " has the wrong type (got " + std::string(v.type_name()) + ")");
  }
}

template <typename T>
T non_negative_int(const std::string& where, const json& v) {
  if (!v.is_number_integer()) {
    throw ConfigError("config: " + where + " must be an integer (got " + std::string(v.type_name()) + ")");
  }
  if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
    throw ConfigError("config: " + where + " must be >= 0");
  }
  return v.get<T>();
}

template <typename T>
T integer(const std::string& where, const json& v) {
  if (!v.is_number_integer()) {
    throw ConfigError("config: " + where + " must be an integer (got " + std::string(v.type_name()) + ")");
  }
  return v.get<T>();
}

double real(const std::string& where, const json& v) {
  if (!v.is_number()) throw ConfigError("config: " + where + " must be a number (got " + std::string(v.type_name()) + ")");
  return v.get<double>();
}

template <typename F>
auto parse_enum(const std::string& where, const json& v, F parse) {
  const auto s = typed<std::string>(where, v);
  try {
    return parse(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: " + where + ": " + e.what());
  }
}

}  // namespace

json RunConfig::to_json() const {
  const auto& t = train;
  const auto& s = synthetic;
  return {
      {"train",
       {{"segment_len", t.segment_len},
        {"full_len", t.full_len},
        {"short_len", t.short_len},
        {"slots", t.slots},
        {"dim", t.dim},
        {"n_layers", t.n_layers},
        {"n_heads", t.n_heads},
        {"lr", t.lr},
        {"weight_decay", t.weight_decay},
        {"batch_size", t.batch_size},
        {"consistency_weight", t.consistency_weight},
        {"mode", prefmem::to_string(t.mode)},
        {"epochs", t.epochs},
        {"patience", t.patience},
        {"seed", t.seed},
        {"trainer", prefmem::to_string(t.trainer)},
        {"recon_weight", t.recon_weight},
        {"mse_reduction", "mean"},
        {"valid_users", t.valid_users}}},
      {"synthetic",
       {{"n_users", s.n_users},
        {"seq_len", s.seq_len},
        {"catalog_size", s.catalog_size},
        {"n_categories", s.n_categories},
        {"prefs_per_user", s.prefs_per_user},
        {"long_term_weight", s.long_term_weight},
        {"session_burst_len", s.session_burst_len},
        {"noise_rate", s.noise_rate},
        {"seed", s.seed},
        {"item_zipf", s.item_zipf}}},
      {"eval",
       {{"protocol", prefmem::to_string(eval.protocol)},
        {"target", eval.target == EvalTarget::kTest ? "test" : "valid"},
        {"max_users", eval.max_users}}}};
}

void RunConfig::set(const std::string& section, const std::string& key, const json& v) {
  const std::string where = section + "." + key;
  if (section == "train") {
    auto& t = train;
    if (key == "segment_len") t.segment_len = integer<Index>(where, v);
    else if (key == "full_len") t.full_len = integer<Index>(where, v);
    else if (key == "short_len") t.short_len = integer<Index>(where, v);
    else if (key == "slots") t.slots = integer<int>(where, v);
    else if (key == "dim") t.dim = integer<Index>(where, v);
    else if (key == "n_layers") t.n_layers = integer<int>(where, v);
    else if (key == "n_heads") t.n_heads = integer<int>(where, v);
    else if (key == "lr") t.lr = real(where, v);
    else if (key == "weight_decay") t.weight_decay = real(where, v);
    else if (key == "batch_size") t.batch_size = integer<int>(where, v);
    else if (key == "consistency_weight" || key == "lambda") t.consistency_weight = real(where, v);
    else if (key == "mode") t.mode = parse_enum(where, v, memory_mode_from_string);
    else if (key == "epochs") t.epochs = integer<int>(where, v);
    else if (key == "patience") t.patience = integer<int>(where, v);
    else if (key == "seed") t.seed = non_negative_int<std::uint64_t>(where, v);
    else if (key == "trainer") t.trainer = parse_enum(where, v, trainer_kind_from_string);
    else if (key == "recon_weight") t.recon_weight = real(where, v);
    else if (key == "valid_users") t.valid_users = integer<std::int64_t>(where, v);
    else if (key == "mse_reduction") {
      if (typed<std::string>(where, v) != "mean") throw ConfigError("config: train.mse_reduction is fixed to \"mean\"");
    } else {
      throw ConfigError("config: unknown key '" + key + "' in section 'train'");
    }
  } else if (section == "synthetic") {
    auto& s = synthetic;
    if (key == "n_users") s.n_users = integer<std::int64_t>(where, v);
    else if (key == "seq_len") s.seq_len = integer<std::int64_t>(where, v);
    else if (key == "catalog_size") s.catalog_size = integer<Index>(where, v);
    else if (key == "n_categories") s.n_categories = integer<int>(where, v);
    else if (key == "prefs_per_user") s.prefs_per_user = integer<int>(where, v);
    else if (key == "long_term_weight") s.long_term_weight = real(where, v);
    else if (key == "session_burst_len") s.session_burst_len = integer<int>(where, v);
    else if (key == "noise_rate") s.noise_rate = real(where, v);
    else if (key == "seed") s.seed = non_negative_int<std::uint64_t>(where, v);
    else if (key == "item_zipf") s.item_zipf = real(where, v);
    else throw ConfigError("config: unknown key '" + key + "' in section 'synthetic'");
  } else if (section == "eval") {
    if (key == "protocol") {
      eval.protocol = parse_enum(where, v, protocol_from_string);
    } else if (key == "target") {
      const auto s = typed<std::string>(where, v);
      if (s == "test") eval.target = EvalTarget::kTest;
      else if (s == "valid") eval.target = EvalTarget::kValid;
      else throw ConfigError("config: eval.target must be \"test\" or \"valid\"");
    } else if (key == "max_users") {
      eval.max_users = integer<std::int64_t>(where, v);
    } else {
      throw ConfigError("config: unknown key '" + key + "' in section 'eval'");
    }
  } else {
    throw ConfigError("config: unknown section '" + section + "' (expected train, synthetic or eval)");
  }
}

void RunConfig::validate() const {
  try {
    train.validate();
    synthetic.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (eval.max_users < 0) throw ConfigError("config: eval.max_users must be >= 0");
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  RunConfig c;
  for (const auto& [section, body] : j.items()) {
    if (section != "train" && section != "synthetic" && section != "eval") {
      throw ConfigError("config: unknown section '" + section + "' (expected train, synthetic or eval)");
    }
    if (!body.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) c.set(section, key, value);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

json RunManifest::to_json() const {
  return {{"command", command},   {"config", config},     {"seed", seed},       {"started_at", started_at},
          {"finished_at", finished_at}, {"artifacts", artifacts}, {"reports", reports}, {"version", version}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.reports = j.at("reports");
    m.version = j.at("version").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return m;
}

void RunManifest::write(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("manifest: cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest: " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunManifest::from_json(j);
}

std::string version_string() { return std::string("prefmem ") + PREFMEM_VERSION; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace prefmem
