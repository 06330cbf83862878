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

#include "prefmem/params_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "bytes.hpp"

namespace prefmem {

namespace {

using detail::crc_of;
using detail::get_le;
using detail::put_le;

constexpr char kMagic[4] = {'R', '2', 'P', 'W'};

void need(std::span<const std::uint8_t> bytes, std::size_t pos, std::size_t n) {
  if (pos + n > bytes.size()) {
    throw ParamsFileError(ParamsFileErrorKind::kTruncated, "params file: truncated at byte " + std::to_string(pos) +
                                                               " (need " + std::to_string(n) + " more)");
  }
}

std::string dims_string(const std::vector<std::uint64_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s;
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"catalog_size", c.catalog_size}, {"dim", c.dim},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},           {"slots", c.slots},   {"context_len", c.context_len},
          {"memory", c.memory}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.catalog_size = j.at("catalog_size").get<Index>();
    c.dim = j.at("dim").get<Index>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.slots = j.at("slots").get<int>();
    c.context_len = j.at("context_len").get<Index>();
    c.memory = j.at("memory").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : model_config_to_json(config).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize_params(const ParamsF& params) {
  const auto tensors = params.named_tensors();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kParamsFormatVersion);
  put_le<std::uint64_t>(out, config_hash(params.config));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    put_le<std::uint32_t>(out, 2);
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(nt.tensor.rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(nt.tensor.cols()));
    const float* data = nt.tensor.value().data();
    for (Index i = 0; i < nt.tensor.size(); ++i) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(data[i]));
  }
  put_le<std::uint32_t>(out, crc_of(out.data(), out.size()));
  return out;
}

ParamsF deserialize_params(std::span<const std::uint8_t> bytes, const ModelConfig& expected, std::ostream* warnings) {
  expected.validate();
  std::size_t pos = 0;
  need(bytes, pos, kParamsHeaderBytes + kParamsTrailerBytes);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ParamsFileError(ParamsFileErrorKind::kBadMagic, "params file: bad magic (not an R2PW file)");
  }
  pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kParamsFormatVersion) {
    throw ParamsFileError(ParamsFileErrorKind::kBadVersion,
                          "params file: unsupported version " + std::to_string(version));
  }
  const std::size_t crc_pos = bytes.size() - kParamsTrailerBytes;
  std::size_t tmp = crc_pos;
  if (get_le<std::uint32_t>(bytes, tmp) != crc_of(bytes.data(), crc_pos)) {
    throw ParamsFileError(ParamsFileErrorKind::kBadCrc, "params file: CRC mismatch");
  }
  const auto hash = get_le<std::uint64_t>(bytes, pos);
  if (hash != config_hash(expected) && warnings != nullptr) {
    *warnings << "warning: params file config hash differs from the expected model config\n";
  }
  const auto count = get_le<std::uint32_t>(bytes, pos);

  ParamsF params = ParamsF::init(expected, 0);
  auto slots = params.named_tensors();
  std::vector<std::string> diffs;
  std::vector<std::pair<std::string, std::vector<std::uint64_t>>> found;
  std::vector<std::vector<float>> payloads;
  const std::span<const std::uint8_t> body = bytes.first(crc_pos);
  for (std::uint32_t t = 0; t < count; ++t) {
    need(body, pos, 4);
    const auto name_len = get_le<std::uint32_t>(body, pos);
    need(body, pos, name_len);
    std::string name(reinterpret_cast<const char*>(body.data() + pos), name_len);
    pos += name_len;
    need(body, pos, 4);
    const auto rank = get_le<std::uint32_t>(body, pos);
    need(body, pos, 8ULL * rank);
    std::vector<std::uint64_t> dims;
    std::uint64_t elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      dims.push_back(get_le<std::uint64_t>(body, pos));
      elems *= dims.back();
    }
    need(body, pos, 4 * elems);
    std::vector<float> values(elems);
    for (auto& v : values) v = std::bit_cast<float>(get_le<std::uint32_t>(body, pos));
    found.emplace_back(std::move(name), std::move(dims));
    payloads.push_back(std::move(values));
  }
  if (pos != crc_pos) {
    throw ParamsFileError(ParamsFileErrorKind::kTruncated,
                          "params file: " + std::to_string(crc_pos - pos) + " trailing bytes after the tensor list");
  }

  for (const auto& slot : slots) {
    const std::vector<std::uint64_t> want{static_cast<std::uint64_t>(slot.tensor.rows()),
                                          static_cast<std::uint64_t>(slot.tensor.cols())};
    auto it = std::find_if(found.begin(), found.end(), [&](const auto& f) { return f.first == slot.name; });
    if (it == found.end()) {
      diffs.push_back(slot.name + ": missing from file, expected " + dims_string(want));
    } else if (it->second != want) {
      diffs.push_back(slot.name + ": file " + dims_string(it->second) + ", expected " + dims_string(want));
    }
  }
  for (const auto& f : found) {
    if (std::none_of(slots.begin(), slots.end(), [&](const auto& s) { return s.name == f.first; })) {
      diffs.push_back(f.first + ": not part of the expected model");
    }
  }
  if (!diffs.empty()) {
    std::string msg = "params file does not match the model config:";
    for (const auto& d : diffs) msg += "\n  " + d;
    throw ParamsFileError(ParamsFileErrorKind::kShapeMismatch, msg);
  }
  for (auto& slot : slots) {
    const auto idx = static_cast<std::size_t>(
        std::find_if(found.begin(), found.end(), [&](const auto& f) { return f.first == slot.name; }) - found.begin());
    std::memcpy(slot.tensor.mutable_value().data(), payloads[idx].data(), payloads[idx].size() * sizeof(float));
  }
  return params;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParamsFileError(ParamsFileErrorKind::kIo, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ParamsFileError(ParamsFileErrorKind::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ParamsFileError(ParamsFileErrorKind::kIo, "cannot rename " + tmp.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_params(const ParamsF& params, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_params(params));
}

ParamsF load_params(const std::filesystem::path& path, const ModelConfig& expected, std::ostream* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParamsFileError(ParamsFileErrorKind::kIo, "params file: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_params(bytes, expected, warnings);
}

}  // namespace prefmem
