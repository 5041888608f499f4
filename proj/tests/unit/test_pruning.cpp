// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "nncomp/error.hpp"
#include "nncomp/pruning.hpp"
#include "nncomp/regularization.hpp"
#include "testing.hpp"

using namespace nncomp;
using nncomp::testing::random_tensor;

namespace {

std::vector<double> mask_of(const Mask& m) { return m.values.to_vector(); }

/// Independent group index: filters are leading-axis slices, blocks tile rows x cols.
std::size_t group_index(const Shape& shape, const Granularity& g, std::size_t flat) {
  switch (g.kind) {
    case Granularity::Kind::Element: return flat;
    case Granularity::Kind::Filter: return flat / (shape_numel(shape) / shape[0]);
    case Granularity::Kind::Block: {
      const std::size_t r = flat / shape[1], c = flat % shape[1];
      return (r / g.block_rows) * (shape[1] / g.block_cols) + c / g.block_cols;
    }
  }
  return 0;
}

struct Case {
  Tensor w;
  Granularity g;
  double level;
};

Case random_case(Rng& rng) {
  const int kind = static_cast<int>(rng.below(4));
  Case c;
  c.level = rng.uniform(0.0, 0.999);
  if (kind == 0) {
    c.w = random_tensor(rng, {1 + rng.below(9), 1 + rng.below(9)});
    c.g = Granularity::element();
  } else if (kind == 1) {
    c.w = random_tensor(rng, {1 + rng.below(8), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)});
    c.g = Granularity::filter();
  } else if (kind == 2) {
    c.w = random_tensor(rng, {1 + rng.below(10), 1 + rng.below(6)});
    c.g = Granularity::filter();
  } else {
    const std::size_t br = 1 + rng.below(3), bc = 1 + rng.below(3);
    c.w = random_tensor(rng, {br * (1 + rng.below(4)), bc * (1 + rng.below(4))});
    c.g = Granularity::block(br, bc);
  }
  return c;
}

}  // namespace

TEST(SensitivityMask, Examples) {
  Tensor w({4}, {1, -1, 1, -1});
  EXPECT_EQ(mask_of(sensitivity_magnitude_mask(w, 0.5)), (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(mask_of(sensitivity_magnitude_mask(w, 1.5)), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_THROW(sensitivity_magnitude_mask(w, 0.0), ContractError);
}

TEST(LevelMask, Examples) {
  Tensor w({4}, {0.1, -0.5, 0.3, -0.2});
  EXPECT_EQ(mask_of(level_mask(w, 0.5, Granularity::element())), (std::vector<double>{0, 1, 1, 0}));
  Tensor f({4, 1, 1, 1}, {4, -3, 2, 1});
  EXPECT_EQ(mask_of(level_mask(f, 0.25, Granularity::filter())), (std::vector<double>{1, 1, 1, 0}));
  EXPECT_THROW(level_mask(Tensor({3, 4}), 0.5, Granularity::block(2, 2)), DimensionError);
  EXPECT_THROW(level_mask(w, 1.0, Granularity::element()), ContractError);
}

TEST(LevelMask, TiesGoToLowerIndex) {
  Tensor w({4}, {1, 1, 1, 1});
  EXPECT_EQ(mask_of(level_mask(w, 0.5, Granularity::element())), (std::vector<double>{0, 0, 1, 1}));
}

TEST(LevelMask, ZeroesExactlyFloorLevelTimesGroups) {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    Case c = random_case(rng);
    const Shape& shape = c.w.shape();
    Mask m = level_mask(c.w, c.level, c.g);
    std::size_t groups = 0;
    for (std::size_t i = 0; i < c.w.numel(); ++i) groups = std::max(groups, group_index(shape, c.g, i) + 1);
    std::vector<double> norm(groups, 0.0);
    std::vector<int> state(groups, -1);
    auto mv = m.values.data();
    auto wv = c.w.data();
    for (std::size_t i = 0; i < c.w.numel(); ++i) {
      const std::size_t gi = group_index(shape, c.g, i);
      norm[gi] += std::abs(wv[i]);
      ASSERT_TRUE(mv[i] == 0.0 || mv[i] == 1.0);
      const int v = static_cast<int>(mv[i]);
      if (state[gi] < 0) state[gi] = v;
      ASSERT_EQ(state[gi], v) << "mask not constant within a group, trial " << trial;
    }
    const auto expect = static_cast<std::size_t>(std::floor(c.level * static_cast<double>(groups)));
    const auto zeroed = static_cast<std::size_t>(std::count(state.begin(), state.end(), 0));
    ASSERT_EQ(zeroed, expect) << "trial " << trial << " " << granularity_name(c.g) << " " << shape_str(shape);
    double max_zeroed = -1.0, min_kept = 1e300;
    for (std::size_t g = 0; g < groups; ++g) {
      if (state[g] == 0) max_zeroed = std::max(max_zeroed, norm[g]);
      else min_kept = std::min(min_kept, norm[g]);
    }
    ASSERT_LE(max_zeroed, min_kept);
  }
}

TEST(PruneLowestGroups, CountAndRange) {
  Tensor f({4, 2}, {4, 0, 3, 0, 2, 0, 1, 0});
  EXPECT_EQ(mask_of(prune_lowest_groups(f, 2, Granularity::filter())), (std::vector<double>{1, 1, 1, 1, 0, 0, 0, 0}));
  EXPECT_THROW(prune_lowest_groups(f, 5, Granularity::filter()), ContractError);
}

TEST(Agp, EndpointsMidpointAndMonotone) {
  AgpState s{0.0, 0.9, 0.0, 100.0, 1.0};
  EXPECT_EQ(agp_target(s, 0.0), 0.0);
  EXPECT_EQ(agp_target(s, 100.0), 0.9);
  EXPECT_NEAR(agp_target(s, 50.0), 0.7875, 1e-12);
  EXPECT_EQ(agp_target(s, 150.0), 0.9);
  EXPECT_EQ(agp_target(s, -3.0), 0.0);
  double prev = -1.0;
  for (int t = 0; t <= 100; ++t) {
    const double v = agp_target(s, t);
    EXPECT_GE(v, prev);
    prev = v;
  }
  AgpState r{0.05, 0.8, 3.0, 10.0, 2.0};
  EXPECT_EQ(agp_target(r, 3.0), 0.05);
  EXPECT_EQ(agp_target(r, 13.0), 0.8);
  AgpState bad{0.5, 0.2, 0.0, 10.0, 1.0};
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Surgery, SplicingTrace) {
  const double t = 1.0, a = 0.9, b = 1.1;
  Tensor w({1}, {0.0});
  Mask m = ones_mask(w);
  m.values.mutable_data()[0] = 0.0;
  m = surgery_update(w, m, t, a, b);
  EXPECT_EQ(m.values.item(), 0.0);
  w.mutable_data()[0] = 1.0;
  m = surgery_update(w, m, t, a, b);
  EXPECT_EQ(m.values.item(), 0.0) << "inside the band the mask keeps its state";
  w.mutable_data()[0] = 2.0 * b * t;
  m = surgery_update(w, m, t, a, b);
  EXPECT_EQ(m.values.item(), 1.0);
  w.mutable_data()[0] = 1.0;
  m = surgery_update(w, m, t, a, b);
  EXPECT_EQ(m.values.item(), 1.0);
  w.mutable_data()[0] = -0.5;
  m = surgery_update(w, m, t, a, b);
  EXPECT_EQ(m.values.item(), 0.0);
  EXPECT_THROW(surgery_update(w, m, t, 1.2, 1.1), ContractError);
}

TEST(ApplyMasks, ZeroCountAndIdempotence) {
  Model model = build_model("mlp-blobs", 3);
  Rng rng(8);
  Mask m = ones_mask(model.param("fc2.weight"), "fc2.weight");
  std::vector<std::size_t> idx(1024);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < 37; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  for (std::size_t i = 0; i < 37; ++i) m.values.mutable_data()[idx[i]] = 0.0;
  MaskSet masks{{"fc2.weight", m}};
  apply_masks(model, masks);
  auto once = model.param("fc2.weight").to_vector();
  EXPECT_GE(static_cast<std::size_t>(std::count(once.begin(), once.end(), 0.0)), 37u);
  for (std::size_t i = 0; i < 37; ++i) EXPECT_EQ(once[idx[i]], 0.0);
  apply_masks(model, masks);
  EXPECT_EQ(model.param("fc2.weight").to_vector(), once);
  MaskSet unknown{{"nope.weight", m}};
  EXPECT_THROW(apply_masks(model, unknown), ContractError);
}

TEST(Regularization, LpExamples) {
  EXPECT_EQ(lp_penalty(Tensor({2}, {1, -2}, DType::F64), 1.0, 1).item(), 3.0);
  EXPECT_NEAR(lp_penalty(Tensor({2}, {3, 4}, DType::F64), 0.1, 2).item(), 2.5, 1e-15);
  EXPECT_THROW(lp_penalty(Tensor({2}), 1.0, 3), ContractError);
}

TEST(Regularization, GroupLassoExamples) {
  Tensor one({1, 2}, {3, 4}, DType::F64);
  EXPECT_NEAR(group_lasso_penalty(one, 0.1, LassoGrouping{}).item(), 0.5, 1e-15);
  Tensor two({2, 2}, {3, 4, 0, 0}, DType::F64);
  two.set_requires_grad(true);
  Tensor p = group_lasso_penalty(two, 1.0, LassoGrouping{});
  EXPECT_EQ(p.item(), 5.0);
  backward(p);
  auto g = two.grad().to_vector();
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  EXPECT_EQ(g[2], 0.0);
  EXPECT_EQ(g[3], 0.0);
}

TEST(Regularization, Groupings) {
  Grouping ch = make_lasso_grouping({3, 4}, LassoGrouping{LassoGrouping::Kind::Channel, 1, 1});
  EXPECT_EQ(ch.groups, 4u);
  EXPECT_EQ(ch.group_of[5], 1u);
  Grouping conv_ch = make_lasso_grouping({3, 2, 2, 2}, LassoGrouping{LassoGrouping::Kind::Channel, 1, 1});
  EXPECT_EQ(conv_ch.groups, 2u);
  EXPECT_EQ(conv_ch.group_of[4], 1u);
  Grouping blk = make_lasso_grouping({4, 6}, LassoGrouping{LassoGrouping::Kind::Block, 2, 3});
  EXPECT_EQ(blk.groups, 4u);
  EXPECT_THROW(make_lasso_grouping({4, 5}, LassoGrouping{LassoGrouping::Kind::Block, 2, 3}), DimensionError);
}
