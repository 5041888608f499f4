// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace nncomp {

/// 1-based position in the recipe text; 0 when unknown.
struct SourceLoc {
  int line = 0;
  int column = 0;
  std::string str() const;
};

/// One entry of an instance table. `params` holds the class parameters as a
/// flat JSON object of numbers and strings.
struct InstanceSpec {
  std::string name;
  std::string cls;
  nlohmann::json params = nlohmann::json::object();
  std::vector<std::string> weights;
  /// Per-weight parameter overrides.
  std::map<std::string, nlohmann::json> overrides;
  SourceLoc loc;

  bool operator==(const InstanceSpec& o) const {
    return name == o.name && cls == o.cls && params == o.params && weights == o.weights &&
           overrides == o.overrides;
  }
  /// Parameter value for `weight`, honoring overrides.
  double number(const std::string& key, const std::string& weight = {}) const;
  double number_or(const std::string& key, double fallback, const std::string& weight = {}) const;
  std::string text_or(const std::string& key, const std::string& fallback) const;
};

enum class PolicyKind { Pruner, Regularizer, Quantizer, Distiller, LrStep };

const char* policy_kind_name(PolicyKind k) noexcept;

struct Policy {
  PolicyKind kind = PolicyKind::Pruner;
  /// Instance table key; empty for lr_step.
  std::string instance_name;
  std::int64_t starting_epoch = 0;
  std::int64_t ending_epoch = 0;
  std::int64_t frequency = 1;
  /// lr_step parameters (gamma).
  nlohmann::json params = nlohmann::json::object();
  SourceLoc loc;

  bool operator==(const Policy& o) const {
    return kind == o.kind && instance_name == o.instance_name && starting_epoch == o.starting_epoch &&
           ending_epoch == o.ending_epoch && frequency == o.frequency && params == o.params;
  }
  bool active_at(std::int64_t epoch) const noexcept;
  /// Label used in event logs.
  std::string label() const;
};

struct Recipe {
  int version = 1;
  std::vector<InstanceSpec> pruners;
  std::vector<InstanceSpec> regularizers;
  std::vector<InstanceSpec> quantizers;
  std::vector<InstanceSpec> distillers;
  std::vector<Policy> policies;

  bool operator==(const Recipe&) const = default;
  const InstanceSpec& instance(const Policy& p) const;
};

inline constexpr int kRecipeVersion = 1;

/// Parses and validates a recipe. Throws RecipeError naming the location.
Recipe parse_recipe(std::string_view yaml_text);
Recipe load_recipe(const std::filesystem::path& path);
std::string serialize_recipe(const Recipe& recipe);

/// Classes known per instance table.
const std::vector<std::string>& pruner_classes();
const std::vector<std::string>& regularizer_classes();
const std::vector<std::string>& quantizer_classes();
const std::vector<std::string>& distiller_classes();

/// Git blob digest: hex SHA-1 of "blob <size>\0" followed by the text.
std::string content_digest(std::string_view text);

}  // namespace nncomp
