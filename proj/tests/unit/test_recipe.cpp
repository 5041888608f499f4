// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "nncomp/error.hpp"
#include "nncomp/recipe.hpp"

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

RecipeError error_of(const std::string& yaml) {
  try {
    parse_recipe(yaml);
  } catch (const RecipeError& e) {
    return e;
  }
  ADD_FAILURE() << "recipe parsed:\n" << yaml;
  return RecipeError(RecipeError::Kind::Syntax, "");
}

std::string with(std::string base, const std::string& from, const std::string& to) {
  const auto pos = base.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  base.replace(pos, from.size(), to);
  return base;
}

}  // namespace

TEST(Recipe, MinimalParses) {
  Recipe r = parse_recipe(kMinimal);
  ASSERT_EQ(r.pruners.size(), 1u);
  EXPECT_EQ(r.pruners[0].cls, "agp");
  EXPECT_EQ(r.pruners[0].number("final_sparsity"), 0.5);
  ASSERT_EQ(r.policies.size(), 1u);
  EXPECT_EQ(r.policies[0].starting_epoch, 1);
  EXPECT_EQ(r.policies[0].ending_epoch, 3);
  EXPECT_EQ(r.policies[0].label(), "p1");
}

TEST(Recipe, ParseSerializeParseIsFixedPoint) {
  for (const char* name : {"agp_prune", "regularize_quantize", "mixed"}) {
    Recipe r = load_recipe(kFixtures / (std::string(name) + ".yaml"));
    const std::string text = serialize_recipe(r);
    Recipe again = parse_recipe(text);
    EXPECT_EQ(again, r) << name;
    EXPECT_EQ(serialize_recipe(again), text) << name;
  }
  Recipe m = parse_recipe(kMinimal);
  EXPECT_EQ(parse_recipe(serialize_recipe(m)), m);
}

TEST(Recipe, OverridesApplyPerWeight) {
  Recipe r = load_recipe(kFixtures / "agp_prune.yaml");
  const InstanceSpec& p = r.pruners.at(0);
  EXPECT_EQ(p.number("final_sparsity", "fc1.weight"), 0.6);
  EXPECT_EQ(p.number("final_sparsity", "fc2.weight"), 0.8);
  EXPECT_EQ(r.policies.at(1).kind, PolicyKind::LrStep);
  EXPECT_EQ(r.policies.at(1).params.at("gamma"), 0.5);
}

TEST(Recipe, FrequencyDefaultsToOne) {
  Recipe r = load_recipe(kFixtures / "regularize_quantize.yaml");
  EXPECT_EQ(r.policies.at(2).frequency, 1);
}

TEST(Recipe, UnresolvedInstanceNamesIt) {
  RecipeError e = error_of(with(kMinimal, "{instance_name: p1}", "{instance_name: ghost}"));
  EXPECT_EQ(e.kind(), RecipeError::Kind::Unresolved);
  EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  EXPECT_NE(std::string(e.what()).find("line 9"), std::string::npos) << e.what();
}

TEST(Recipe, SyntaxErrorHasLineAndColumn) {
  RecipeError e = error_of("version: 1\npruners:\n  p1: [unclosed\n");
  EXPECT_EQ(e.kind(), RecipeError::Kind::Syntax);
  EXPECT_NE(std::string(e.what()).find("line "), std::string::npos) << e.what();
  EXPECT_NE(std::string(e.what()).find("column "), std::string::npos) << e.what();
}

TEST(Recipe, OutOfRangeParameter) {
  RecipeError e = error_of(with(kMinimal, "final_sparsity: 0.5", "final_sparsity: 1.5"));
  EXPECT_EQ(e.kind(), RecipeError::Kind::OutOfRange);
  EXPECT_NE(std::string(e.what()).find("line 6"), std::string::npos) << e.what();
  EXPECT_EQ(error_of(with(kMinimal, "frequency: 1", "frequency: 0")).kind(), RecipeError::Kind::OutOfRange);
  EXPECT_EQ(error_of(with(kMinimal, "ending_epoch: 3", "ending_epoch: 0")).kind(), RecipeError::Kind::OutOfRange);
  EXPECT_EQ(error_of(with(kMinimal, "version: 1", "version: 2")).kind(), RecipeError::Kind::OutOfRange);
}

TEST(Recipe, DistinctErrorKinds) {
  EXPECT_EQ(error_of(std::string(kMinimal) + "extras: 1\n").kind(), RecipeError::Kind::UnknownKey);
  RecipeError cls = error_of(with(kMinimal, "class: agp", "class: magic"));
  EXPECT_EQ(cls.kind(), RecipeError::Kind::UnknownClass);
  EXPECT_NE(std::string(cls.what()).find("magic"), std::string::npos);
  EXPECT_EQ(error_of(with(kMinimal, "    starting_epoch: 1\n", "")).kind(), RecipeError::Kind::MissingField);
  EXPECT_EQ(error_of(with(kMinimal, "    weights: [fc1.weight]\n", "")).kind(), RecipeError::Kind::MissingField);
  EXPECT_EQ(error_of(with(kMinimal, "initial_sparsity: 0.0", "initial_sparsity: 0.0\n    speed: 2")).kind(),
            RecipeError::Kind::UnknownKey);
  EXPECT_EQ(error_of(with(kMinimal, "initial_sparsity: 0.0", "initial_sparsity: 0.7")).kind(),
            RecipeError::Kind::OutOfRange);
  EXPECT_EQ(error_of(with(kMinimal, "    weights: [fc1.weight]\n",
                          "    weights: [fc1.weight]\n    overrides:\n      fc2.weight: {final_sparsity: 0.3}\n"))
                .kind(),
            RecipeError::Kind::Unresolved);
}

TEST(Recipe, EmptyPoliciesAllowed) {
  Recipe r = parse_recipe("version: 1\npolicies: []\n");
  EXPECT_TRUE(r.policies.empty());
}

TEST(Recipe, ContentDigestIsGitBlobSha1) {
  EXPECT_EQ(content_digest("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(content_digest(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
