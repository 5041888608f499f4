// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "nncomp/distill.hpp"
#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"
#include "nncomp/pruning.hpp"
#include "nncomp/training.hpp"
#include "testing.hpp"

using namespace nncomp;
using nncomp::testing::random_tensor;

TEST(Kd, TwoClassWorkedExample) {
  Tensor s({1, 2}, {0, 0}, DType::F64);
  Tensor t({1, 2}, {std::log(3.0), 0}, DType::F64);
  std::vector<std::int32_t> y{0};
  const double got = kd_loss(s, t, y, DistillSpec{1.0, 0.0, 1.0}).item();
  const double closed = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(got, closed, 1e-15);
  EXPECT_NEAR(got, 0.13081, 1e-4);
}

TEST(Kd, TeacherEqualsStudentReducesToWeightedCe) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = random_tensor(rng, {6, 5}, -3.0, 3.0);
    std::vector<std::int32_t> y(6);
    for (auto& v : y) v = static_cast<std::int32_t>(rng.below(5));
    DistillSpec spec{rng.uniform(0.5, 5.0), rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)};
    const double kd = kd_loss(z, z, y, spec).item();
    const double ce = spec.student_weight * cross_entropy(z, y).item();
    EXPECT_NEAR(kd, ce, 1e-12);
  }
}

TEST(Kd, TeacherIsDetached) {
  Tensor s({1, 3}, {0.1, 0.2, 0.3}, DType::F64);
  Tensor t({1, 3}, {1.0, -1.0, 0.0}, DType::F64);
  t.set_requires_grad(true);
  s.set_requires_grad(true);
  std::vector<std::int32_t> y{2};
  backward(kd_loss(s, t, y, DistillSpec{2.0, 0.5, 0.5}));
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(Kd, Validation) {
  EXPECT_THROW((DistillSpec{0.0, 1.0, 0.0}.validate()), ContractError);
  EXPECT_THROW((DistillSpec{1.0, 0.0, 0.0}.validate()), ContractError);
  std::vector<std::int32_t> y{0};
  EXPECT_THROW(kd_loss(Tensor({1, 2}), Tensor({1, 3}), y, DistillSpec{}), DimensionError);
}

TEST(Lth, RewindRestoresSurvivorsBitwise) {
  Model m = build_model("mlp-blobs", 7);
  LthState snap = lth_snapshot(m);
  Dataset ds = gen_blobs(30, 4, 0.3, 7);
  TrainConfig cfg;
  cfg.epochs = 2;
  train(m, ds, nullptr, cfg);
  MaskSet masks;
  for (const char* w : {"fc1.weight", "fc2.weight", "fc3.weight"}) {
    masks.emplace(w, level_mask(m.param(w), 0.5, Granularity::element(), w));
  }
  lth_rewind(m, snap, masks);
  for (const auto& [name, init] : snap.initial) {
    auto now = m.param(name).to_vector();
    auto then = init.to_vector();
    auto it = masks.find(name);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < now.size(); ++i) {
      if (it != masks.end() && it->second.values.data()[i] == 0.0) {
        EXPECT_EQ(now[i], 0.0);
        ++zeros;
      } else {
        EXPECT_EQ(std::memcmp(&now[i], &then[i], sizeof(double)), 0) << name << "[" << i << "]";
      }
    }
    if (it != masks.end()) EXPECT_EQ(zeros, now.size() / 2);
  }
  Model other = build_model("cnn-tiny", 1);
  EXPECT_THROW(lth_rewind(other, snap, {}), DimensionError);
}

TEST(Training, LearnsBlobsAndIsReproducible) {
  Dataset tr = gen_blobs(100, 4, 0.3, 7), ev = gen_blobs(100, 4, 0.3, 8);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.sampler.seed = 7;
  Model a = build_model("mlp-blobs", 7), b = build_model("mlp-blobs", 7);
  auto ha = train(a, tr, &ev, cfg);
  auto hb = train(b, tr, &ev, cfg);
  ASSERT_EQ(ha.size(), 5u);
  EXPECT_GE(ha.back().eval_accuracy, 0.95);
  EXPECT_LT(ha.back().loss, ha.front().loss);
  for (const auto& [name, t] : a.parameters()) EXPECT_EQ(b.param(name).to_vector(), t.to_vector());
}

TEST(Training, CountCorrectFirstMaximumWins) {
  Tensor logits({2, 3}, {1, 1, 0, 0, 2, 2});
  std::vector<std::int32_t> y{0, 2};
  EXPECT_EQ(count_correct(logits, y), 1u);
}

TEST(Training, ExitBranchesTrainJointly) {
  Model m = build_model("mlp-blobs", 3);
  m.add_exit(ExitBranch{"relu1", {LayerSpec::linear("exit1", 32, 4)}, 0.5, 0.3});
  Dataset tr = gen_blobs(50, 4, 0.3, 1);
  const auto before = m.param("exit1.weight").to_vector();
  TrainConfig cfg;
  cfg.epochs = 1;
  train(m, tr, nullptr, cfg);
  EXPECT_NE(m.param("exit1.weight").to_vector(), before);
}
