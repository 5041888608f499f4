// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <set>

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"
#include "nncomp/recipe.hpp"
#include "nncomp/scheduler.hpp"
#include "nncomp/training.hpp"
#include "testing.hpp"

using namespace nncomp;

namespace {

const std::filesystem::path kFixtures = NNCOMP_FIXTURE_DIR;

const char* kMinimal = R"(version: 1
pruners:
  p1:
    class: agp
    initial_sparsity: 0.0
    final_sparsity: 0.5
    weights: [fc1.weight]
policies:
  - pruner: {instance_name: p1}
    starting_epoch: 1
    ending_epoch: 3
    frequency: 1
)";

std::string policy_recipe(int start, int end, int freq) {
  return "version: 1\npruners:\n  p1:\n    class: level\n    level: 0.5\n    weights: [fc2.weight]\n"
         "policies:\n  - pruner: {instance_name: p1}\n    starting_epoch: " +
         std::to_string(start) + "\n    ending_epoch: " + std::to_string(end) + "\n    frequency: " +
         std::to_string(freq) + "\n";
}

std::set<std::int64_t> recompute_epochs(const std::vector<SchedulerEvent>& events) {
  std::set<std::int64_t> s;
  for (const auto& e : events)
    if (e.action == "recompute_masks") s.insert(e.epoch);
  return s;
}

/// Drives the callbacks directly: `epochs` epochs of `mb` minibatches.
std::vector<SchedulerEvent> drive(const std::string& yaml, std::int64_t epochs, std::int64_t mb) {
  Model m = build_model("mlp-blobs", 7);
  CompressionScheduler s(m, parse_recipe(yaml));
  for (std::int64_t e = 0; e < epochs; ++e) {
    s.on_epoch_begin(e);
    for (std::int64_t b = 0; b < mb; ++b) {
      s.on_minibatch_begin(b);
      s.before_backward_pass(b, {});
      s.before_parameter_optimization(b);
      s.on_minibatch_end(b);
    }
    s.on_epoch_end(e);
  }
  return s.events();
}

std::string fixture_trace(const std::string& name) {
  return nncomp::testing::fixture_trace(kFixtures / (name + ".yaml"));
}

}  // namespace

TEST(Scheduler, ActivityWindowEveryEpoch) {
  EXPECT_EQ(recompute_epochs(drive(policy_recipe(1, 3, 1), 4, 2)), (std::set<std::int64_t>{1, 2, 3}));
}

TEST(Scheduler, ActivityWindowWithFrequency) {
  EXPECT_EQ(recompute_epochs(drive(policy_recipe(1, 5, 2), 7, 1)), (std::set<std::int64_t>{1, 3, 5}));
  Recipe r = parse_recipe(policy_recipe(1, 5, 2));
  for (std::int64_t e = 0; e < 8; ++e) {
    const bool expect = e >= 1 && e <= 5 && (e - 1) % 2 == 0;
    EXPECT_EQ(r.policies[0].active_at(e), expect) << e;
  }
}

TEST(Scheduler, OneEventPerCallbackWithoutPolicies) {
  auto ev = drive("version: 1\npolicies: []\n", 2, 3);
  EXPECT_EQ(ev.size(), 2u * (2 + 3 * 4));
  for (const auto& e : ev) {
    EXPECT_EQ(e.policy, "-");
    EXPECT_EQ(e.action, "noop");
  }
}

TEST(Scheduler, OutOfOrderCallbacksRejected) {
  Model m = build_model("mlp-blobs", 7);
  CompressionScheduler s(m);
  EXPECT_THROW(s.on_minibatch_begin(0), ContractError);
  s.on_epoch_begin(0);
  EXPECT_THROW(s.before_backward_pass(0, {}), ContractError);
  s.on_minibatch_begin(0);
  EXPECT_THROW(s.on_minibatch_end(0), ContractError);
  EXPECT_THROW(s.before_backward_pass(1, {}), ContractError);
  s.before_backward_pass(0, {});
  s.before_parameter_optimization(0);
  s.on_minibatch_end(0);
  EXPECT_THROW(s.on_epoch_end(3), ContractError);
  s.on_epoch_end(0);
}

TEST(Scheduler, NoActivePolicyReturnsExactZero) {
  Model m = build_model("mlp-blobs", 7);
  CompressionScheduler s(m, parse_recipe(policy_recipe(3, 4, 1)));
  s.on_epoch_begin(0);
  s.on_minibatch_begin(0);
  Tensor t = s.before_backward_pass(0, {});
  EXPECT_EQ(t.item(), 0.0);
  EXPECT_FALSE(t.requires_grad());
}

TEST(Scheduler, BindChecksWeightsExist) {
  Model m = build_model("mlp-blobs", 7);
  std::string yaml = policy_recipe(0, 1, 1);
  yaml.replace(yaml.find("fc2.weight"), 10, "fc9.weight");
  try {
    CompressionScheduler s(m, parse_recipe(yaml));
    FAIL();
  } catch (const RecipeError& e) {
    EXPECT_EQ(e.kind(), RecipeError::Kind::UnknownParameter);
    EXPECT_NE(std::string(e.what()).find("fc9.weight"), std::string::npos);
  }
}

TEST(Scheduler, EmptyRecipeIsBitwiseNeutral) {
  Dataset ds = gen_blobs(20, 4, 0.3, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.momentum = 0.9;
  cfg.sampler = SamplerSpec{SamplerKind::Shuffled, 1.0, 5};
  Model a = build_model("mlp-blobs", 7), b = build_model("mlp-blobs", 7);
  train(a, ds, nullptr, cfg);
  CompressionScheduler s(b, parse_recipe("version: 1\n"));
  train(b, ds, nullptr, cfg, s);
  for (const auto& [name, t] : a.parameters()) EXPECT_EQ(b.param(name).to_vector(), t.to_vector()) << name;
}

TEST(Scheduler, ParametersAtLeastAsSparseAsMasks) {
  Model m = build_model("mlp-blobs", 7);
  CompressionScheduler s(m, load_recipe(kFixtures / "agp_prune.yaml"));
  Dataset ds = gen_blobs(8, 4, 0.3, 1);
  Sgd opt(0.1);
  s.set_optimizer(&opt);
  for (std::int64_t e = 0; e < 5; ++e) {
    s.on_epoch_begin(e);
    MinibatchStream stream(ds, 8, SamplerSpec{}, static_cast<std::size_t>(e));
    std::int64_t mb = 0;
    while (auto batch = stream.next()) {
      s.on_minibatch_begin(mb);
      for (const auto& [name, mask] : s.masks()) {
        std::size_t zeros = 0;
        for (double v : m.param(name).data()) zeros += v == 0.0;
        EXPECT_GE(zeros, mask.zeros()) << name << " epoch " << e;
      }
      Tensor logits = m.forward(batch->x, Mode::Train);
      StepContext ctx{&batch->x, batch->y, &logits};
      Tensor loss = add(cross_entropy(logits, batch->y), s.before_backward_pass(mb, ctx));
      zero_grads(m.trainable());
      backward(loss);
      s.before_parameter_optimization(mb);
      opt.step(m.trainable());
      s.on_minibatch_end(mb);
      ++mb;
    }
    s.on_epoch_end(e);
  }
  EXPECT_NEAR(opt.lr(), 0.1 * 0.25, 1e-15);
  EXPECT_EQ(s.masks().at("fc2.weight").zeros(), static_cast<std::size_t>(0.8 * 1024));
  EXPECT_EQ(s.masks().at("fc1.weight").zeros(), static_cast<std::size_t>(0.6 * 64));
}

class GoldenTrace : public ::testing::TestWithParam<std::string> {};

TEST_P(GoldenTrace, MatchesCheckedInLog) {
  const std::string name = GetParam();
  const std::string got = fixture_trace(name);
  const auto path = kFixtures / (name + ".trace.csv");
  if (std::getenv("NNCOMP_UPDATE_GOLDEN")) save_csv(parse_csv(got), path);
  const CsvTable expect = load_csv(path);
  EXPECT_EQ(parse_csv(got), expect);
  EXPECT_EQ(fixture_trace(name), got) << "trace is not deterministic";
}

INSTANTIATE_TEST_SUITE_P(Fixtures, GoldenTrace,
                         ::testing::Values("agp_prune", "regularize_quantize", "mixed"));

TEST(GoldenTraceOracle, RegularizeQuantizeActivity) {
  CsvTable t = load_csv(kFixtures / "regularize_quantize.trace.csv");
  std::set<std::string> penalty, qat;
  for (const auto& r : t.rows) {
    if (r[4] == "penalty") penalty.insert(r[3] + "@" + r[0]);
    if (r[4] == "enable_qat") qat.insert(r[3] + "@" + r[0]);
  }
  EXPECT_EQ(penalty, (std::set<std::string>{"l1@0", "l1@1", "rows@0", "rows@2", "rows@4"}));
  EXPECT_EQ(qat, (std::set<std::string>{"q8@2"}));
}

TEST(GoldenTraceOracle, MixedActivity) {
  CsvTable t = load_csv(kFixtures / "mixed.trace.csv");
  std::set<std::string> recompute, distill;
  for (const auto& r : t.rows) {
    if (r[4] == "recompute_masks") recompute.insert(r[3] + "@" + r[0]);
    if (r[4] == "distill" && r[1] == "0") distill.insert(r[0]);
  }
  EXPECT_EQ(recompute, (std::set<std::string>{"l1_filters@0", "level_half@1", "splice@2", "splice@3",
                                              "level_half@3", "level_half@5"}));
  EXPECT_EQ(distill, (std::set<std::string>{"0", "3", "6"}));
}
