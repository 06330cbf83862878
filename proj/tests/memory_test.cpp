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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "prefmem/memory.hpp"
#include "test_util.hpp"

using namespace prefmem;
using prefmem::testing::tiny_config;

namespace {

ParamsF small_params(int slots = 2, Index context = 4, std::uint64_t seed = 1) {
  return ModelParams<float>::init(tiny_config(30, 8, 2, 2, slots, context), seed);
}

std::vector<ItemId> items(std::initializer_list<ItemId> v) { return v; }

MemoryFileErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize_memory(bytes);
  } catch (const MemoryFileError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return MemoryFileErrorKind::kIo;
}

}  // namespace

TEST(EncodeMemory, ShapeForAnyContextLength) {
  const auto p = small_params(3, 6);
  for (std::size_t n = 0; n <= 6; ++n) {
    std::vector<ItemId> s(n, 5);
    EXPECT_EQ(encode_memory(p, encode_layout(0, s, 3)).rows(), 3);
    EXPECT_EQ(encode_memory(p, encode_layout(0, s, 3)).cols(), 8);
  }
}

TEST(EncodeMemory, NullMemoryDependsOnlyOnParams) {
  const auto p = small_params();
  const MatrixF a = encode_memory(p, encode_layout(0, std::vector<ItemId>{}, 2));
  const MatrixF b = encode_memory(p, encode_layout(0, std::vector<ItemId>{}, 2));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, encode_memory(small_params(2, 4, 2), encode_layout(0, std::vector<ItemId>{}, 2)));
}

TEST(EncodeMemory, RequiresTrailingQueryBlock) {
  const auto p = small_params();
  EXPECT_THROW(encode_memory(p, decode_layout(0, items({1, 2}))), std::invalid_argument);
  EXPECT_THROW(encode_memory(p, encode_layout(0, items({1, 2}), 1)), std::invalid_argument);
}

TEST(EncodeMemory, HandComputedOneLayer) {
  // C=1, d=4, one item. Wq = Wk = 0 gives uniform attention, Wv = Wo = I,
  // FFN zero, so m = LN(x_Q + (LN(x_I) + LN(x_Q)) / 2).
  auto pd = ModelParams<double>::init(tiny_config(3, 4, 1, 1, 1, 1), 0);
  for (auto& nt : pd.named_tensors()) nt.tensor.mutable_value().setZero();
  auto& L = pd.layers[0];
  L.ln1_gamma.mutable_value().setOnes();
  L.ln2_gamma.mutable_value().setOnes();
  pd.final_gamma.mutable_value().setOnes();
  L.wv.mutable_value() = MatrixD::Identity(4, 4);
  L.wo.mutable_value() = MatrixD::Identity(4, 4);
  pd.item_embeddings.mutable_value().row(2) << 1, 0, -1, 2;
  pd.position_embeddings.mutable_value() << 0.5, 0, 0, 0;
  pd.memory_queries.mutable_value() << 0, 3, 1, 0;
  pd.slot_embeddings.mutable_value() << 0, 0, 0, 1;
  const auto p = pd.cast<float>();

  auto ln = [](std::vector<double> v) {
    double mu = 0, var = 0;
    for (double x : v) mu += x / 4;
    for (double x : v) var += (x - mu) * (x - mu) / 4;
    for (double& x : v) x = (x - mu) / std::sqrt(var + 1e-5);
    return v;
  };
  const std::vector<double> xi = {1.5, 0, -1, 2}, xq = {0, 3, 1, 1};
  const auto ai = ln(xi), aq = ln(xq);
  std::vector<double> h(4);
  for (int c = 0; c < 4; ++c) h[c] = xq[c] + (ai[c] + aq[c]) / 2;
  const auto want = ln(h);
  const MatrixF m = encode_memory(p, encode_layout(0, items({2}), 1));
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(m(0, c), want[c], 1e-5);
}

TEST(InitMemory, BothModesStartEqual) {
  const auto p = small_params();
  const auto s0 = items({1, 2, 3, 4});
  const auto o = init_memory(p, s0, MemoryMode::kOverwrite, "u");
  const auto a = init_memory(p, s0, MemoryMode::kAppend, "u");
  EXPECT_EQ(o.content, a.content);
  EXPECT_EQ(o.segments_absorbed, 1u);
  EXPECT_EQ(o.content, encode_memory(p, encode_layout(0, s0, 2)));
  EXPECT_THROW(init_memory(p, std::vector<ItemId>{}, MemoryMode::kOverwrite), std::invalid_argument);
}

TEST(UpdateMemory, ModeRowCounts) {
  const auto p = small_params();
  auto o = init_memory(p, items({1, 2, 3, 4}), MemoryMode::kOverwrite);
  auto a = init_memory(p, items({1, 2, 3, 4}), MemoryMode::kAppend);
  for (int k = 1; k <= 3; ++k) {
    o = update_memory(p, o, items({5, 6, 7, static_cast<ItemId>(k)}));
    a = update_memory(p, a, items({5, 6, 7, static_cast<ItemId>(k)}));
    EXPECT_EQ(o.rows(), 2);
    EXPECT_EQ(a.rows(), 2 * (k + 1));
    EXPECT_EQ(a.segments_absorbed, static_cast<std::uint32_t>(k + 1));
    o.validate();
    a.validate();
  }
}

TEST(UpdateMemory, PartialSegmentIsRejected) {
  const auto p = small_params();
  const auto m = init_memory(p, items({1, 2, 3, 4}), MemoryMode::kOverwrite);
  EXPECT_THROW(update_memory(p, m, items({1, 2, 3})), std::invalid_argument);
}

TEST(UpdateMemory, DeterministicAndMatchesReplay) {
  const auto p = small_params();
  const std::vector<std::vector<ItemId>> segs = {{1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 12}, {0, 1, 2, 3}};
  auto a = init_memory(p, segs[0], MemoryMode::kAppend);
  const MatrixF m0 = a.content;
  for (std::size_t k = 1; k < segs.size(); ++k) {
    const auto next = update_memory(p, a, segs[k]);
    EXPECT_EQ(next, update_memory(p, a, segs[k]));
    // Replay: the new block is encode([M; S_k; Q]) computed by hand.
    const MatrixF block =
        encode_memory(p, encode_layout(a.rows(), segs[k], 2, static_cast<int>(k)), &a.content);
    EXPECT_EQ(MatrixF(next.content.bottomRows(2)), block);
    EXPECT_EQ(MatrixF(next.content.topRows(a.rows())), a.content);
    a = next;
  }
  EXPECT_EQ(MatrixF(a.content.topRows(2)), m0);
}

TEST(MemoryState, ValidateCatchesBrokenInvariants) {
  MemoryState m;
  m.slots = 2;
  m.dim = 3;
  m.segments_absorbed = 1;
  m.content = MatrixF::Zero(2, 3);
  EXPECT_NO_THROW(m.validate());
  m.content = MatrixF::Zero(4, 3);
  EXPECT_THROW(m.validate(), std::invalid_argument);
  m.mode = MemoryMode::kAppend;
  m.segments_absorbed = 2;
  EXPECT_NO_THROW(m.validate());
  m.content(0, 0) = NAN;
  EXPECT_THROW(m.validate(), NumericError);
}

TEST(MemoryFile, RoundTripAndSize) {
  const auto p = small_params();
  auto a = init_memory(p, items({1, 2, 3, 4}), MemoryMode::kAppend, "user-7");
  a = update_memory(p, a, items({4, 3, 2, 1}));
  const auto bytes = serialize_memory(a);
  EXPECT_EQ(bytes.size(), memory_file_bytes(2, 8, 2, MemoryMode::kAppend));
  MemoryState back = deserialize_memory(bytes);
  back.user_id = a.user_id;  // the id is the file name's business, not the payload's
  EXPECT_EQ(back, a);

  const auto path = std::filesystem::temp_directory_path() / "prefmem_memory_test.r2pm";
  save_memory(a, path);
  MemoryState loaded = load_memory(path);
  loaded.user_id = a.user_id;
  EXPECT_EQ(loaded, a);
  std::filesystem::remove(path);
  EXPECT_THROW(load_memory(path), MemoryFileError);
}

TEST(MemoryFile, HeaderLayoutIsLittleEndian) {
  MemoryState m;
  m.slots = 4;
  m.dim = 2;
  m.segments_absorbed = 3;
  m.content = MatrixF::Zero(4, 2);
  m.content(0, 0) = 1.0f;
  const auto b = serialize_memory(m);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "R2PM");
  EXPECT_EQ(b[4], 1);      // version
  EXPECT_EQ(b[5], 0);      // OVERWRITE
  EXPECT_EQ(b[6], 4);      // C
  EXPECT_EQ(b[8], 2);      // d
  EXPECT_EQ(b[10], 3);     // segments
  EXPECT_EQ(b[14], 4);     // rows
  EXPECT_EQ(b[18 + 3], 0x3F);  // 1.0f = 0x3F800000
  EXPECT_EQ(b[18 + 2], 0x80);
}

TEST(MemoryFile, DistinctErrorKinds) {
  const auto p = small_params();
  const auto good = serialize_memory(init_memory(p, items({1, 2}), MemoryMode::kOverwrite));
  auto bad = good;
  bad[0] = 'X';
  EXPECT_EQ(kind_of(bad), MemoryFileErrorKind::kBadMagic);
  bad = good;
  bad[4] = 9;
  EXPECT_EQ(kind_of(bad), MemoryFileErrorKind::kBadVersion);
  bad = good;
  bad[20] ^= 0x01;
  EXPECT_EQ(kind_of(bad), MemoryFileErrorKind::kBadCrc);
  bad = good;
  bad.pop_back();
  EXPECT_EQ(kind_of(bad), MemoryFileErrorKind::kTruncated);
  EXPECT_EQ(kind_of(std::vector<std::uint8_t>(5, 0)), MemoryFileErrorKind::kTruncated);
}

TEST(Footprint, StorageTableNumbers) {
  EXPECT_EQ(memory_payload_bytes(4, 64, 1, MemoryMode::kOverwrite), 1024u);
  EXPECT_EQ(memory_payload_bytes(4, 64, 4, MemoryMode::kOverwrite), 1024u);
  EXPECT_EQ(memory_payload_bytes(4, 64, 4, MemoryMode::kAppend), 4096u);
  EXPECT_EQ(kv_footprint_bytes(4, 64, 16, 4, MemoryMode::kOverwrite), 32768u);
  EXPECT_EQ(kv_footprint_bytes(4, 64, 16, 4, MemoryMode::kAppend), 131072u);
  EXPECT_EQ(kv_footprint_bytes(4, 64, 0, 4, MemoryMode::kAppend), 0u);
  EXPECT_EQ(memory_file_bytes(4, 64, 1, MemoryMode::kOverwrite), 1024u + 18u + 4u);
}

TEST(Footprint, TokenToKvRatioIsOneOverTwoLayers) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const int c = 1 + static_cast<int>(rng() % 16), layers = 1 + static_cast<int>(rng() % 32);
    const Index d = 1 + static_cast<Index>(rng() % 256);
    const std::uint64_t segs = 1 + rng() % 10;
    const auto mode = rng() % 2 ? MemoryMode::kAppend : MemoryMode::kOverwrite;
    EXPECT_EQ(kv_footprint_bytes(c, d, layers, segs, mode),
              2u * static_cast<std::uint64_t>(layers) * memory_payload_bytes(c, d, segs, mode));
  }
}

TEST(MemoryMode, Names) {
  EXPECT_EQ(memory_mode_from_string("append"), MemoryMode::kAppend);
  EXPECT_EQ(memory_mode_from_string("O"), MemoryMode::kOverwrite);
  EXPECT_EQ(to_string(MemoryMode::kAppend), "append");
  EXPECT_THROW(memory_mode_from_string("both"), std::invalid_argument);
}
