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

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "prefmem/memory.hpp"
#include "prefmem/training.hpp"
#include "test_util.hpp"

using namespace prefmem;
using prefmem::testing::max_grad_error;
using prefmem::testing::random_matrix;
using prefmem::testing::tiny_config;

namespace {

SegmentedHistory history(std::mt19937_64& rng, std::size_t n_items, Index seg_len, ItemId catalog) {
  std::vector<ItemId> items(n_items);
  for (auto& v : items) v = static_cast<ItemId>(rng() % static_cast<std::uint64_t>(catalog));
  return segment(items, seg_len);
}

std::vector<TensorD> leaves_of(const ModelParams<double>& p) {
  std::vector<TensorD> out;
  for (const auto& nt : p.named_tensors()) out.push_back(nt.tensor);
  return out;
}

Dataset small_dataset(std::int64_t users, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.n_users = users;
  s.seed = seed;
  return generate_synthetic(s);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.dim = 16;
  c.epochs = 3;
  c.valid_users = 50;
  return c;
}

}  // namespace

TEST(Stage1, SingleSegmentMatchesInitMemory) {
  const auto p = ModelParams<float>::init(tiny_config(30, 8, 2, 2, 2, 4), 1);
  const SegmentedHistory h = segment(std::vector<ItemId>{3, 4, 5, 6}, 4);
  const auto refs = stage1_reference_pass(p, h);
  ASSERT_EQ(refs.size(), 1u);
  const MatrixF m0 = init_memory(p, h.segments[0], MemoryMode::kOverwrite).content;
  EXPECT_LT((refs[0].value() - m0).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Stage1, EveryReferenceEqualsOneOffPrefixCompression) {
  std::mt19937_64 rng(2);
  const auto p = ModelParams<float>::init(tiny_config(30, 8, 2, 2, 3, 4), 2);
  const SegmentedHistory h = history(rng, 14, 4, 30);  // 4, 4, 4, 2
  const auto refs = stage1_reference_pass(p, h);
  ASSERT_EQ(refs.size(), h.size());
  for (std::size_t s = 0; s < h.size(); ++s) {
    const MatrixF want = encode_memory(p, prefix_layout(h.segments, s, 3));
    EXPECT_LT((refs[s].value() - want).cwiseAbs().maxCoeff(), 1e-5f) << "segment " << s;
  }
}

TEST(ReferenceContext, ModesAndRange) {
  std::mt19937_64 rng(3);
  std::vector<TensorD> refs;
  for (int h = 0; h < 4; ++h) refs.emplace_back(random_matrix(rng, 2, 3));
  for (std::size_t h = 1; h < 4; ++h) {
    EXPECT_EQ(build_reference_context<double>(refs, h, MemoryMode::kOverwrite).value(), refs[h - 1].value());
  }
  const MatrixD app = build_reference_context<double>(refs, 3, MemoryMode::kAppend).value();
  ASSERT_EQ(app.rows(), 6);
  EXPECT_EQ(MatrixD(app.topRows(2)), refs[0].value());
  EXPECT_EQ(MatrixD(app.bottomRows(2)), refs[2].value());
  EXPECT_THROW(build_reference_context<double>(refs, 0, MemoryMode::kAppend), std::out_of_range);
  EXPECT_THROW(build_reference_context<double>(refs, 4, MemoryMode::kAppend), std::out_of_range);
}

TEST(ConsistencyLoss, Examples) {
  std::mt19937_64 rng(4);
  std::vector<TensorD> a = {TensorD(random_matrix(rng, 2, 3)), TensorD(random_matrix(rng, 2, 3))};
  EXPECT_EQ(consistency_loss<double>(a, a).item(), 0.0);

  const std::vector<TensorD> ref = {TensorD(MatrixD::Zero(2, 3))};
  const std::vector<TensorD> upd = {TensorD(MatrixD::Constant(2, 3, 2.0))};
  EXPECT_DOUBLE_EQ(consistency_loss<double>(ref, upd).item(), 4.0);

  std::vector<TensorD> b = {TensorD(random_matrix(rng, 2, 3)), TensorD(random_matrix(rng, 2, 3))};
  double oracle = 0;
  for (std::size_t k = 0; k < 2; ++k) {
    double pair = 0;
    for (Index i = 0; i < 6; ++i) {
      const double d = a[k].value().data()[i] - b[k].value().data()[i];
      pair += d * d;
    }
    oracle += pair / 6.0;
  }
  EXPECT_NEAR(consistency_loss<double>(a, b).item(), oracle / 2.0, 1e-14);

  EXPECT_THROW(consistency_loss<double>(a, std::vector<TensorD>{b[0]}), std::invalid_argument);
  EXPECT_THROW(consistency_loss<double>(ref, std::vector<TensorD>{TensorD(MatrixD::Zero(3, 2))}), ShapeError);
}

TEST(ConsistencyLoss, GradientReachesUpdatesOnly) {
  TensorD ref(MatrixD::Ones(2, 2), true), upd(MatrixD::Zero(2, 2), true);
  consistency_loss<double>(std::vector<TensorD>{ref}, std::vector<TensorD>{upd}).backward();
  EXPECT_FALSE(ref.has_grad());
  EXPECT_TRUE(upd.grad().isApprox(MatrixD::Constant(2, 2, -0.5)));
}

TEST(Stage2, HandComputedArLossSingleSegment) {
  // No layers, d=4: hidden = LN(item + pos + role), logits against the table.
  auto p = ModelParams<double>::init(tiny_config(3, 4, 0, 1, 1, 2), 0);
  for (auto& nt : p.named_tensors()) nt.tensor.mutable_value().setZero();
  p.final_gamma.mutable_value().setOnes();
  p.item_embeddings.mutable_value() << 1, 0, 0, 0, 0, 2, 0, 0, 0, 0, 1, -1;
  p.position_embeddings.mutable_value() << 0, 0, 0, 1, 0, 0, 0, 0;
  const SegmentedHistory h = segment(std::vector<ItemId>{0, 2}, 2);
  const auto refs = stage1_reference_pass(p, h);
  const auto out = stage2_parallel_pass(p, h, std::span<const TensorD>(refs), StageTwoOptions{});
  EXPECT_EQ(out.n_targets, 1);

  // x = item 0 + position 0 = (1, 0, 0, 1): mean 0.5, variance 0.25, so
  // LN(x) = (1, −1, −1, 1)·s with s = 0.5 / sqrt(0.25 + 1e-5).
  const double s = 0.5 / std::sqrt(0.25 + 1e-5);
  const double logits[3] = {s, -2 * s, -2 * s};  // table rows dotted with LN(x)
  const double z = std::log(std::exp(logits[0]) + std::exp(logits[1]) + std::exp(logits[2]));
  EXPECT_NEAR(out.loss_ar.item(), z - logits[2], 1e-12);
}

TEST(Stage2, LambdaZeroAndDecomposition) {
  std::mt19937_64 rng(5);
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 2, 2, 2, 4), 5);
  const std::vector<SegmentedHistory> users = {history(rng, 13, 4, 30), history(rng, 8, 4, 30)};
  const auto ref = stage1_reference_pass(p, std::span<const SegmentedHistory>(users));
  for (double lambda : {0.0, 1.0, 0.3}) {
    for (double rw : {0.0, 0.7}) {
      StageTwoOptions o;
      o.consistency_weight = lambda;
      o.recon_weight = rw;
      const auto out = stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, o);
      EXPECT_NEAR(out.loss_total.item(),
                  out.loss_ar.item() + lambda * out.loss_con.item() + rw * out.loss_recon.item(), 1e-6);
      if (lambda == 0.0 && rw == 0.0) EXPECT_EQ(out.loss_total.item(), out.loss_ar.item());
      if (rw == 0.0) EXPECT_EQ(out.loss_recon.item(), 0.0);
      EXPECT_TRUE(out.teacher_forced);
      EXPECT_EQ(out.m_upd.size(), 5u);  // full segments: 3 + 2
      EXPECT_GT(out.loss_con.item(), 0.0);
    }
  }
}

TEST(Stage2, TargetsCrossSegmentBoundaries) {
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 1, 2, 2, 4), 6);
  const SegmentedHistory h = segment(std::vector<ItemId>{1, 2, 3, 4, 5, 6, 7, 8, 9}, 4);
  const auto refs = stage1_reference_pass(p, h);
  const auto out = stage2_parallel_pass(p, h, std::span<const TensorD>(refs), StageTwoOptions{});
  EXPECT_EQ(out.n_targets, 8);  // every item but the last has a successor
  EXPECT_EQ(out.m_upd.size(), 2u);
}

TEST(Stage2, MismatchedReferenceCountIsAnError) {
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 1, 2, 2, 4), 6);
  const SegmentedHistory h = segment(std::vector<ItemId>{1, 2, 3, 4, 5}, 4);
  const std::vector<TensorD> one = {TensorD(MatrixD::Zero(2, 8))};
  EXPECT_THROW(stage2_parallel_pass(p, h, std::span<const TensorD>(one), StageTwoOptions{}), std::invalid_argument);
}

TEST(Stage2, PackOrderDoesNotChangeLosses) {
  std::mt19937_64 rng(7);
  const auto p = ModelParams<float>::init(tiny_config(30, 8, 2, 2, 2, 4), 7);
  const std::vector<SegmentedHistory> users = {history(rng, 16, 4, 30), history(rng, 10, 4, 30),
                                               history(rng, 5, 4, 30)};
  const auto ref = stage1_reference_pass(p, std::span<const SegmentedHistory>(users));
  StageTwoOptions o;
  o.recon_weight = 0.5;
  o.mode = MemoryMode::kAppend;
  const auto base = stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, o);
  for (int trial = 0; trial < 5; ++trial) {
    o.pack_order.resize(8);  // 4 + 3 + 1 stage-2 layouts
    std::iota(o.pack_order.begin(), o.pack_order.end(), 0);
    std::shuffle(o.pack_order.begin(), o.pack_order.end(), rng);
    const auto out = stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, o);
    EXPECT_NEAR(out.loss_ar.item(), base.loss_ar.item(), 1e-6);
    EXPECT_NEAR(out.loss_con.item(), base.loss_con.item(), 1e-6);
    EXPECT_NEAR(out.loss_recon.item(), base.loss_recon.item(), 1e-6);
  }
  o.pack_order = {0, 1};
  EXPECT_THROW(stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, o), std::invalid_argument);
}

TEST(Stage2, FullObjectiveGradientMatchesFiniteDifferences) {
  // L_con treats m_ref as a constant target, so the numeric side freezes the
  // references at the base point and differentiates everything else.
  std::mt19937_64 rng(8);
  auto p = ModelParams<double>::init(tiny_config(12, 4, 2, 2, 2, 3), 8);
  const std::vector<SegmentedHistory> users = {history(rng, 6, 3, 12), history(rng, 5, 3, 12)};
  for (auto mode : {MemoryMode::kOverwrite, MemoryMode::kAppend}) {
    StageTwoOptions full;
    full.mode = mode;
    full.recon_weight = 0.5;
    StageTwoOptions no_con = full;
    no_con.consistency_weight = 0.0;
    std::vector<TensorD> frozen;
    double base_total = 0;
    {
      const auto ref = stage1_reference_pass(p, std::span<const SegmentedHistory>(users));
      const auto out = stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, full);
      for (const auto& m : out.m_ref) frozen.push_back(m.detach());
      base_total = out.loss_total.item();
    }
    auto loss = [&] {
      const auto ref = stage1_reference_pass(p, std::span<const SegmentedHistory>(users));
      const auto out = stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, no_con);
      return out.loss_total + consistency_loss<double>(frozen, out.m_upd);
    };
    EXPECT_NEAR(loss().item(), base_total, 1e-12);
    // Analytic side: the trainer's own objective.
    for (auto t : leaves_of(p)) t.zero_grad();
    {
      const auto ref = stage1_reference_pass(p, std::span<const SegmentedHistory>(users));
      stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, full).loss_total.backward();
    }
    std::vector<MatrixD> analytic;
    for (const auto& t : leaves_of(p)) analytic.push_back(t.grad());
    EXPECT_LT(max_grad_error(loss, leaves_of(p), 1e-5), 1e-3) << to_string(mode);
    const auto leaves = leaves_of(p);
    for (std::size_t i = 0; i < leaves.size(); ++i) EXPECT_TRUE(leaves[i].grad().isApprox(analytic[i], 1e-12));
  }
}

TEST(Stage2, ReferenceMemoriesReceiveArGradient) {
  std::mt19937_64 rng(9);
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 2, 2, 2, 4), 9);
  const SegmentedHistory h = history(rng, 8, 4, 30);
  auto refs = stage1_reference_pass(p, h);
  StageTwoOptions o;
  o.consistency_weight = 0.0;
  stage2_parallel_pass(p, h, std::span<const TensorD>(refs), o).loss_total.backward();
  ASSERT_TRUE(refs[0].has_grad());
  EXPECT_GT(refs[0].grad().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Reconstruction, LengthOneIsPredictionFromMemoryAlone) {
  std::mt19937_64 rng(10);
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 2, 2, 2, 4), 10);
  const TensorD m(random_matrix(rng, 2, 8));
  const std::vector<std::vector<ItemId>> prefix = {{7}};
  const double got = reconstruction_loss(p, m, std::span<const std::vector<ItemId>>(prefix)).item();
  const auto layout = decode_layout(2, prefix[0]);
  const MatrixD h = transformer_forward(p, embed_layout(p, layout, &m), build_causal_mask(layout)).value();
  const MatrixD logits = p.item_embeddings.value() * h.row(1).transpose();
  const double want = std::log(logits.array().exp().sum()) - logits(7, 0);
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(Reconstruction, EqualsManualDecodeOverSeveralSegments) {
  std::mt19937_64 rng(11);
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 2, 2, 2, 4), 11);
  const TensorD m(random_matrix(rng, 2, 8));
  const std::vector<std::vector<ItemId>> prefix = {{1, 2, 3, 4}, {5, 6}};
  const double got = reconstruction_loss(p, m, std::span<const std::vector<ItemId>>(prefix)).item();
  SequenceLayout layout;
  layout.append_memory(2);
  layout.append_items(prefix[0], 0);
  layout.append_items(prefix[1], 1);
  const MatrixD h = transformer_forward(p, embed_layout(p, layout, &m), build_causal_mask(layout)).value();
  const std::vector<ItemId> flat = {1, 2, 3, 4, 5, 6};
  double sum = 0;
  for (std::size_t t = 0; t < flat.size(); ++t) {
    const MatrixD logits = p.item_embeddings.value() * h.row(1 + static_cast<Index>(t)).transpose();
    sum += std::log(logits.array().exp().sum()) - logits(flat[t], 0);
  }
  EXPECT_NEAR(got, sum / 6.0, 1e-12);
}

TEST(Serial, SingleSegmentUsersMatchParallelWithoutConsistency) {
  std::mt19937_64 rng(12);
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 2, 2, 2, 4), 12);
  const std::vector<SegmentedHistory> users = {history(rng, 4, 4, 30), history(rng, 3, 4, 30)};
  const auto serial = serial_unrolled_pass(p, std::span<const SegmentedHistory>(users), MemoryMode::kOverwrite);
  StageTwoOptions o;
  o.consistency_weight = 0.0;
  const auto ref = stage1_reference_pass(p, std::span<const SegmentedHistory>(users));
  const auto par = stage2_parallel_pass(p, std::span<const SegmentedHistory>(users), ref, o);
  EXPECT_NEAR(serial.loss_total.item(), par.loss_total.item(), 1e-12);
  EXPECT_EQ(serial.n_targets, par.n_targets);
}

TEST(Serial, MemoryIsDetachedBetweenSegments) {
  std::mt19937_64 rng(13);
  const auto p = ModelParams<double>::init(tiny_config(30, 8, 2, 2, 2, 4), 13);
  const std::vector<SegmentedHistory> users = {history(rng, 12, 4, 30)};
  for (auto mode : {MemoryMode::kOverwrite, MemoryMode::kAppend}) {
    const auto out = serial_unrolled_pass(p, std::span<const SegmentedHistory>(users), mode);
    ASSERT_EQ(out.segment_losses.size(), 3u);
    out.segment_losses[2].backward();
    EXPECT_FALSE(out.segment_inputs[0].has_grad());
    EXPECT_FALSE(out.segment_inputs[1].has_grad());
    ASSERT_TRUE(out.segment_inputs[2].has_grad());
    EXPECT_GT(out.segment_inputs[2].grad().cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Plain, InstanceCounts) {
  std::vector<ItemId> prefix(65);
  std::iota(prefix.begin(), prefix.end(), 0);
  const auto shorts = plain_instances(prefix, TrainerKind::kPlainShort, 16);
  ASSERT_EQ(shorts.size(), 4u);
  EXPECT_EQ(shorts[1].inputs.front(), 16);
  EXPECT_EQ(shorts[1].targets.front(), 17);
  EXPECT_EQ(shorts[3].targets.back(), 64);
  const auto full = plain_instances(prefix, TrainerKind::kPlainFull, 64);
  ASSERT_EQ(full.size(), 1u);
  EXPECT_EQ(full[0].inputs.size(), 64u);

  std::vector<ItemId> long_prefix(1001);
  std::iota(long_prefix.begin(), long_prefix.end(), 0);
  EXPECT_EQ(plain_instances(long_prefix, TrainerKind::kPlainFull, 1000).size(), 1u);
  EXPECT_THROW(plain_instances(prefix, TrainerKind::kRec2PM, 16), std::invalid_argument);
}

TEST(Plain, ShortEqualsFullWhenWindowCoversPrefix) {
  std::mt19937_64 rng(14);
  std::vector<ItemId> prefix(9);
  for (auto& v : prefix) v = static_cast<ItemId>(rng() % 30);
  const auto s = plain_instances(prefix, TrainerKind::kPlainShort, 8);
  const auto f = plain_instances(prefix, TrainerKind::kPlainFull, 8);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].inputs, f[0].inputs);
  EXPECT_EQ(s[0].targets, f[0].targets);
  auto cfg = tiny_config(30, 8, 2, 2, 2, 8);
  cfg.memory = false;
  const auto p = ModelParams<double>::init(cfg, 14);
  EXPECT_EQ(plain_loss<double>(p, s).item(), plain_loss<double>(p, f).item());
}

TEST(TrainingPrefix, DropsEvalItemsAndTruncates) {
  UserSequence u{"u", {}, std::nullopt};
  for (int i = 0; i < 70; ++i) u.items.push_back(i);
  const auto prefix = training_prefix(u, 64);
  ASSERT_EQ(prefix.size(), 65u);
  EXPECT_EQ(prefix.front(), 3);
  EXPECT_EQ(prefix.back(), 67);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.full_len = 60;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.consistency_weight = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.dim = 33;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.trainer = TrainerKind::kPlainShort;
  EXPECT_THROW(train_rec2pm(small_dataset(5), c), std::invalid_argument);
  EXPECT_EQ(trainer_kind_from_string("tok-serial"), TrainerKind::kTokSerial);
  EXPECT_THROW(trainer_kind_from_string("rnn"), std::invalid_argument);
}

TEST(Trainer, ZeroEpochsReturnsInitialParams) {
  TrainConfig c = quick_config();
  c.epochs = 0;
  const auto r = train(small_dataset(10), c);
  const auto init = ParamsF::init(c.model_config(500), c.seed);
  const auto a = r.params.named_tensors(), b = init.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.value(), b[i].tensor.value()) << a[i].name;
  EXPECT_TRUE(r.log.empty());
}

TEST(Trainer, LossesFallOverFirstEpochs) {
  const Dataset ds = small_dataset(300);
  TrainConfig c = quick_config();
  std::ostringstream log;
  const auto r = train(ds, c, &log);
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_LT(r.log[1].loss_total, r.log[0].loss_total);
  EXPECT_LT(r.log[2].loss_total, r.log[1].loss_total);
  EXPECT_LT(r.log[2].loss_con, r.log[0].loss_con);
  EXPECT_NE(log.str().find("\"valid_h10\""), std::string::npos);
  // Reproducible at a fixed seed.
  const auto again = train(ds, c);
  EXPECT_EQ(again.log[2].loss_total, r.log[2].loss_total);
}

TEST(Trainer, BaselinesTrain) {
  const Dataset ds = small_dataset(60);
  for (auto kind : {TrainerKind::kTokSerial, TrainerKind::kPlainShort, TrainerKind::kPlainFull}) {
    TrainConfig c = quick_config();
    c.trainer = kind;
    c.epochs = 2;
    const auto r = train(ds, c);
    ASSERT_EQ(r.log.size(), 2u) << to_string(kind);
    EXPECT_LT(r.log[1].loss_total, r.log[0].loss_total) << to_string(kind);
    EXPECT_EQ(r.params.config.memory, kind == TrainerKind::kTokSerial);
  }
}

TEST(Trainer, DivergenceAbortsWithDiagnostics) {
  TrainConfig c = quick_config();
  c.lr = 1e30;
  c.epochs = 1;
  try {
    train(small_dataset(40), c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("users u"), std::string::npos) << msg;
  }
}
