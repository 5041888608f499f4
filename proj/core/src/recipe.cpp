// SPDX-License-Identifier: Apache-2.0
#include "nncomp/recipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "nncomp/csv.hpp"
#include "nncomp/error.hpp"

namespace nncomp {

std::string SourceLoc::str() const {
  if (line == 0) return "recipe";
  return "line " + std::to_string(line) + ", column " + std::to_string(column);
}

const char* policy_kind_name(PolicyKind k) noexcept {
  switch (k) {
    case PolicyKind::Pruner: return "pruner";
    case PolicyKind::Regularizer: return "regularizer";
    case PolicyKind::Quantizer: return "quantizer";
    case PolicyKind::Distiller: return "distiller";
    case PolicyKind::LrStep: return "lr_step";
  }
  return "?";
}

bool Policy::active_at(std::int64_t epoch) const noexcept {
  return epoch >= starting_epoch && epoch <= ending_epoch && (epoch - starting_epoch) % frequency == 0;
}

std::string Policy::label() const { return kind == PolicyKind::LrStep ? "lr_step" : instance_name; }

double InstanceSpec::number(const std::string& key, const std::string& weight) const {
  if (!weight.empty()) {
    auto it = overrides.find(weight);
    if (it != overrides.end() && it->second.contains(key)) return it->second.at(key).get<double>();
  }
  if (!params.contains(key)) {
    throw RecipeError(RecipeError::Kind::MissingField,
                      loc.str() + ": instance '" + name + "' has no parameter '" + key + "'");
  }
  return params.at(key).get<double>();
}

double InstanceSpec::number_or(const std::string& key, double fallback, const std::string& weight) const {
  if (!weight.empty()) {
    auto it = overrides.find(weight);
    if (it != overrides.end() && it->second.contains(key)) return it->second.at(key).get<double>();
  }
  return params.contains(key) ? params.at(key).get<double>() : fallback;
}

std::string InstanceSpec::text_or(const std::string& key, const std::string& fallback) const {
  return params.contains(key) ? params.at(key).get<std::string>() : fallback;
}

const InstanceSpec& Recipe::instance(const Policy& p) const {
  const std::vector<InstanceSpec>* table = nullptr;
  switch (p.kind) {
    case PolicyKind::Pruner: table = &pruners; break;
    case PolicyKind::Regularizer: table = &regularizers; break;
    case PolicyKind::Quantizer: table = &quantizers; break;
    case PolicyKind::Distiller: table = &distillers; break;
    case PolicyKind::LrStep:
      throw ContractError("lr_step policies have no instance");
  }
  for (const auto& inst : *table) {
    if (inst.name == p.instance_name) return inst;
  }
  throw RecipeError(RecipeError::Kind::Unresolved,
                    p.loc.str() + ": " + policy_kind_name(p.kind) + " '" + p.instance_name + "' is not defined");
}

namespace {

using Kind = RecipeError::Kind;

enum class ParamType { Number, Integer, Text };

struct ParamRule {
  std::string name;
  ParamType type = ParamType::Number;
  bool required = true;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  bool lo_open = false;
  bool hi_open = false;
  std::vector<std::string> choices;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

ParamRule num(std::string n, double lo, double hi, bool lo_open, bool hi_open, bool required = true) {
  return ParamRule{std::move(n), ParamType::Number, required, lo, hi, lo_open, hi_open, {}};
}
ParamRule integer(std::string n, double lo, double hi, bool required = true) {
  return ParamRule{std::move(n), ParamType::Integer, required, lo, hi, false, false, {}};
}
ParamRule text(std::string n, std::vector<std::string> choices, bool required = true) {
  return ParamRule{std::move(n), ParamType::Text, required, 0, 0, false, false, std::move(choices)};
}

using ClassTable = std::vector<std::pair<std::string, std::vector<ParamRule>>>;

const ClassTable& pruner_table() {
  static const ClassTable t = {
      {"sensitivity_magnitude", {num("sensitivity", 0, kInf, true, false)}},
      {"level", {num("level", 0, 1, false, true), text("granularity", {"element", "filter"}, false)}},
      {"agp",
       {num("initial_sparsity", 0, 1, false, true), num("final_sparsity", 0, 1, false, true),
        text("granularity", {"element", "filter", "block"}, false), integer("block_rows", 1, kInf, false),
        integer("block_cols", 1, kInf, false)}},
      {"filter_l1", {integer("filters_to_prune", 0, kInf)}},
      {"block", {num("level", 0, 1, false, true), integer("block_rows", 1, kInf), integer("block_cols", 1, kInf)}},
      {"surgery", {num("threshold", 0, kInf, true, false), num("a", 0, 1, false, false), num("b", 1, kInf, false, false)}},
  };
  return t;
}

const ClassTable& regularizer_table() {
  static const ClassTable t = {
      {"lp", {num("strength", 0, kInf, false, false), integer("p", 1, 2)}},
      {"group_lasso",
       {num("strength", 0, kInf, false, false), text("grouping", {"filter", "channel", "block"}),
        integer("block_rows", 1, kInf, false), integer("block_cols", 1, kInf, false)}},
  };
  return t;
}

const ClassTable& quantizer_table() {
  static const ClassTable t = {
      {"qat_ema", {integer("bits", 2, 8), num("ema_decay", 0, 1, false, true, false)}},
      {"dorefa", {integer("bits", 2, 8), num("ema_decay", 0, 1, false, true, false)}},
      {"pact", {integer("bits", 2, 8), num("alpha_init", 0, kInf, true, false, false)}},
  };
  return t;
}

const ClassTable& distiller_table() {
  static const ClassTable t = {
      {"kd",
       {num("temperature", 0, kInf, true, false), num("student_weight", 0, kInf, false, false),
        num("distill_weight", 0, kInf, false, false), text("teacher", {}, false)}},
  };
  return t;
}

const std::vector<ParamRule>& lr_step_rules() {
  static const std::vector<ParamRule> r = {num("gamma", 0, kInf, true, false)};
  return r;
}

std::vector<std::string> class_names(const ClassTable& t) {
  std::vector<std::string> out;
  for (const auto& [n, _] : t) out.push_back(n);
  return out;
}

SourceLoc loc_of(const YAML::Node& n) {
  YAML::Mark m = n.Mark();
  if (m.is_null()) return {};
  return SourceLoc{m.line + 1, m.column + 1};
}

[[noreturn]] void fail(Kind kind, const YAML::Node& at, const std::string& msg) {
  throw RecipeError(kind, loc_of(at).str() + ": " + msg);
}

std::string scalar_text(const YAML::Node& n, const std::string& what) {
  if (!n.IsScalar()) fail(Kind::Syntax, n, what + " must be a scalar");
  return n.Scalar();
}

double parse_number(const YAML::Node& n, const std::string& what) {
  std::string s = scalar_text(n, what);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    fail(Kind::Syntax, n, what + " must be a finite number, got '" + s + "'");
  }
  return v;
}

std::int64_t parse_integer(const YAML::Node& n, const std::string& what) {
  std::string s = scalar_text(n, what);
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    fail(Kind::Syntax, n, what + " must be an integer, got '" + s + "'");
  }
  return v;
}

void check_range(const ParamRule& r, double v, const YAML::Node& at, const std::string& what) {
  bool ok = (r.lo_open ? v > r.lo : v >= r.lo) && (r.hi_open ? v < r.hi : v <= r.hi);
  if (!ok) {
    std::ostringstream os;
    os << what << " = " << format_double(v) << " is outside " << (r.lo_open ? "(" : "[")
       << format_double(r.lo) << ", " << format_double(r.hi) << (r.hi_open ? ")" : "]");
    fail(Kind::OutOfRange, at, os.str());
  }
}

nlohmann::json parse_param(const ParamRule& r, const YAML::Node& n, const std::string& what) {
  switch (r.type) {
    case ParamType::Number: {
      double v = parse_number(n, what);
      check_range(r, v, n, what);
      return v;
    }
    case ParamType::Integer: {
      std::int64_t v = parse_integer(n, what);
      check_range(r, static_cast<double>(v), n, what);
      return v;
    }
    case ParamType::Text: {
      std::string s = scalar_text(n, what);
      if (!r.choices.empty() && std::find(r.choices.begin(), r.choices.end(), s) == r.choices.end()) {
        std::string opts;
        for (const auto& c : r.choices) opts += (opts.empty() ? "" : ", ") + c;
        fail(Kind::OutOfRange, n, what + " = '" + s + "' is not one of {" + opts + "}");
      }
      return s;
    }
  }
  return nullptr;
}

const ParamRule* find_rule(const std::vector<ParamRule>& rules, const std::string& key) {
  for (const auto& r : rules) {
    if (r.name == key) return &r;
  }
  return nullptr;
}

std::vector<std::string> parse_string_list(const YAML::Node& n, const std::string& what) {
  if (!n.IsSequence()) fail(Kind::Syntax, n, what + " must be a list");
  std::vector<std::string> out;
  for (const auto& e : n) out.push_back(scalar_text(e, what + " entry"));
  return out;
}

void cross_check(const InstanceSpec& inst, const YAML::Node& at) {
  if (inst.cls == "agp" && inst.number("final_sparsity") < inst.number("initial_sparsity")) {
    fail(Kind::OutOfRange, at, "instance '" + inst.name + "': final_sparsity is below initial_sparsity");
  }
  if (inst.cls == "surgery" && inst.number("a") > inst.number("b")) {
    fail(Kind::OutOfRange, at, "instance '" + inst.name + "': a exceeds b");
  }
  if (inst.cls == "kd" && inst.number("student_weight") + inst.number("distill_weight") <= 0.0) {
    fail(Kind::OutOfRange, at, "instance '" + inst.name + "': student_weight + distill_weight must be positive");
  }
  const std::string g = inst.params.contains("granularity") ? inst.text_or("granularity", "") : inst.text_or("grouping", "");
  if (g == "block" && (!inst.params.contains("block_rows") || !inst.params.contains("block_cols"))) {
    fail(Kind::MissingField, at, "instance '" + inst.name + "': block granularity needs block_rows and block_cols");
  }
}

std::vector<InstanceSpec> parse_table(const YAML::Node& node, const std::string& table, const ClassTable& classes,
                                      bool weights_required) {
  std::vector<InstanceSpec> out;
  if (node.IsNull()) return out;
  if (!node.IsMap()) fail(Kind::Syntax, node, "'" + table + "' must be a mapping of instance names");
  for (const auto& kv : node) {
    InstanceSpec inst;
    inst.name = scalar_text(kv.first, "instance name");
    inst.loc = loc_of(kv.first);
    const YAML::Node& body = kv.second;
    const std::string where = table + "." + inst.name;
    if (!body.IsMap()) fail(Kind::Syntax, body, where + " must be a mapping");
    if (!body["class"]) fail(Kind::MissingField, kv.first, where + " has no 'class'");
    inst.cls = scalar_text(body["class"], where + ".class");
    const std::vector<ParamRule>* rules = nullptr;
    for (const auto& [name, r] : classes) {
      if (name == inst.cls) rules = &r;
    }
    if (!rules) fail(Kind::UnknownClass, body["class"], "unknown class '" + inst.cls + "' in " + where);
    bool has_weights = false;
    for (const auto& p : body) {
      const std::string key = scalar_text(p.first, "key");
      if (key == "class") continue;
      if (key == "weights") {
        inst.weights = parse_string_list(p.second, where + ".weights");
        has_weights = true;
        continue;
      }
      if (key == "overrides") continue;
      const ParamRule* r = find_rule(*rules, key);
      if (!r) fail(Kind::UnknownKey, p.first, "unknown parameter '" + key + "' for class '" + inst.cls + "' in " + where);
      inst.params[key] = parse_param(*r, p.second, where + "." + key);
    }
    for (const auto& r : *rules) {
      if (r.required && !inst.params.contains(r.name)) {
        fail(Kind::MissingField, kv.first, where + " is missing required parameter '" + r.name + "'");
      }
    }
    if (weights_required && (!has_weights || inst.weights.empty())) {
      fail(Kind::MissingField, kv.first, where + " must list its target weights");
    }
    if (const YAML::Node ov = body["overrides"]) {
      if (!ov.IsMap()) fail(Kind::Syntax, ov, where + ".overrides must be a mapping");
      for (const auto& w : ov) {
        const std::string wname = scalar_text(w.first, "override target");
        if (std::find(inst.weights.begin(), inst.weights.end(), wname) == inst.weights.end()) {
          fail(Kind::Unresolved, w.first, "override target '" + wname + "' is not among the weights of " + where);
        }
        if (!w.second.IsMap()) fail(Kind::Syntax, w.second, where + ".overrides." + wname + " must be a mapping");
        nlohmann::json obj = nlohmann::json::object();
        for (const auto& p : w.second) {
          const std::string key = scalar_text(p.first, "key");
          const ParamRule* r = find_rule(*rules, key);
          if (!r || r->type == ParamType::Text) {
            fail(Kind::UnknownKey, p.first, "parameter '" + key + "' cannot be overridden in " + where);
          }
          obj[key] = parse_param(*r, p.second, where + ".overrides." + wname + "." + key);
        }
        inst.overrides[wname] = std::move(obj);
      }
    }
    cross_check(inst, kv.first);
    for (const auto& prev : out) {
      if (prev.name == inst.name) fail(Kind::Syntax, kv.first, "duplicate instance '" + inst.name + "' in " + table);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

Policy parse_policy(const YAML::Node& node, std::size_t index) {
  const std::string where = "policies[" + std::to_string(index) + "]";
  if (!node.IsMap()) fail(Kind::Syntax, node, where + " must be a mapping");
  Policy p;
  p.loc = loc_of(node);
  bool have_kind = false, have_start = false, have_end = false;
  static const std::vector<std::pair<std::string, PolicyKind>> kinds = {
      {"pruner", PolicyKind::Pruner},       {"regularizer", PolicyKind::Regularizer},
      {"quantizer", PolicyKind::Quantizer}, {"distiller", PolicyKind::Distiller},
      {"lr_step", PolicyKind::LrStep}};
  for (const auto& kv : node) {
    const std::string key = scalar_text(kv.first, "key");
    if (key == "starting_epoch") {
      p.starting_epoch = parse_integer(kv.second, where + ".starting_epoch");
      have_start = true;
    } else if (key == "ending_epoch") {
      p.ending_epoch = parse_integer(kv.second, where + ".ending_epoch");
      have_end = true;
    } else if (key == "frequency") {
      p.frequency = parse_integer(kv.second, where + ".frequency");
    } else {
      auto it = std::find_if(kinds.begin(), kinds.end(), [&](const auto& k) { return k.first == key; });
      if (it == kinds.end()) fail(Kind::UnknownKey, kv.first, "unknown key '" + key + "' in " + where);
      if (have_kind) fail(Kind::Syntax, kv.first, where + " names more than one policy kind");
      have_kind = true;
      p.kind = it->second;
      const YAML::Node& body = kv.second;
      if (!body.IsMap()) fail(Kind::Syntax, body, where + "." + key + " must be a mapping");
      for (const auto& f : body) {
        const std::string fk = scalar_text(f.first, "key");
        if (p.kind == PolicyKind::LrStep) {
          const ParamRule* r = find_rule(lr_step_rules(), fk);
          if (!r) fail(Kind::UnknownKey, f.first, "unknown lr_step parameter '" + fk + "'");
          p.params[fk] = parse_param(*r, f.second, where + ".lr_step." + fk);
        } else if (fk == "instance_name") {
          p.instance_name = scalar_text(f.second, where + ".instance_name");
        } else {
          fail(Kind::UnknownKey, f.first, "unknown key '" + fk + "' in " + where + "." + key);
        }
      }
      if (p.kind == PolicyKind::LrStep) {
        for (const auto& r : lr_step_rules()) {
          if (!p.params.contains(r.name)) fail(Kind::MissingField, body, where + ".lr_step needs '" + r.name + "'");
        }
      } else if (p.instance_name.empty()) {
        fail(Kind::MissingField, body, where + "." + key + " needs an instance_name");
      }
    }
  }
  if (!have_kind) fail(Kind::MissingField, node, where + " names no policy kind");
  if (!have_start) fail(Kind::MissingField, node, where + " has no starting_epoch");
  if (!have_end) fail(Kind::MissingField, node, where + " has no ending_epoch");
  if (p.starting_epoch < 0) fail(Kind::OutOfRange, node, where + ": starting_epoch must be >= 0");
  if (p.ending_epoch < p.starting_epoch) fail(Kind::OutOfRange, node, where + ": ending_epoch precedes starting_epoch");
  if (p.frequency < 1) fail(Kind::OutOfRange, node, where + ": frequency must be >= 1");
  return p;
}

}  // namespace

const std::vector<std::string>& pruner_classes() {
  static const auto v = class_names(pruner_table());
  return v;
}
const std::vector<std::string>& regularizer_classes() {
  static const auto v = class_names(regularizer_table());
  return v;
}
const std::vector<std::string>& quantizer_classes() {
  static const auto v = class_names(quantizer_table());
  return v;
}
const std::vector<std::string>& distiller_classes() {
  static const auto v = class_names(distiller_table());
  return v;
}

Recipe parse_recipe(std::string_view yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml_text));
  } catch (const YAML::ParserException& e) {
    throw RecipeError(Kind::Syntax, "line " + std::to_string(e.mark.line + 1) + ", column " +
                                        std::to_string(e.mark.column + 1) + ": YAML syntax error: " + e.msg);
  }
  Recipe r;
  if (root.IsNull()) throw RecipeError(Kind::MissingField, "recipe: document is empty");
  if (!root.IsMap()) fail(Kind::Syntax, root, "recipe must be a mapping");
  static const std::vector<std::string> top = {"version", "pruners", "regularizers", "quantizers", "distillers", "policies"};
  for (const auto& kv : root) {
    const std::string key = scalar_text(kv.first, "key");
    if (std::find(top.begin(), top.end(), key) == top.end()) {
      fail(Kind::UnknownKey, kv.first, "unknown top-level key '" + key + "'");
    }
  }
  if (!root["version"]) fail(Kind::MissingField, root, "recipe has no 'version'");
  std::int64_t version = parse_integer(root["version"], "version");
  if (version != kRecipeVersion) {
    fail(Kind::OutOfRange, root["version"], "unsupported recipe version " + std::to_string(version));
  }
  r.version = static_cast<int>(version);
  if (root["pruners"]) r.pruners = parse_table(root["pruners"], "pruners", pruner_table(), true);
  if (root["regularizers"]) r.regularizers = parse_table(root["regularizers"], "regularizers", regularizer_table(), true);
  if (root["quantizers"]) r.quantizers = parse_table(root["quantizers"], "quantizers", quantizer_table(), false);
  if (root["distillers"]) r.distillers = parse_table(root["distillers"], "distillers", distiller_table(), false);
  if (const YAML::Node pol = root["policies"]) {
    if (!pol.IsNull()) {
      if (!pol.IsSequence()) fail(Kind::Syntax, pol, "'policies' must be a list");
      std::size_t i = 0;
      for (const auto& p : pol) r.policies.push_back(parse_policy(p, i++));
    }
  }
  for (const auto& p : r.policies) {
    if (p.kind != PolicyKind::LrStep) r.instance(p);
  }
  return r;
}

Recipe load_recipe(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read recipe " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_recipe(ss.str());
}

namespace {

void emit_value(YAML::Emitter& out, const nlohmann::json& v) {
  if (v.is_string()) {
    out << v.get<std::string>();
  } else if (v.is_number_integer()) {
    out << v.get<std::int64_t>();
  } else {
    out << format_double(v.get<double>());
  }
}

void emit_object(YAML::Emitter& out, const nlohmann::json& obj) {
  for (const auto& [k, v] : obj.items()) {
    out << YAML::Key << k << YAML::Value;
    emit_value(out, v);
  }
}

void emit_table(YAML::Emitter& out, const char* key, const std::vector<InstanceSpec>& table) {
  if (table.empty()) return;
  out << YAML::Key << key << YAML::Value << YAML::BeginMap;
  for (const auto& inst : table) {
    out << YAML::Key << inst.name << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "class" << YAML::Value << inst.cls;
    emit_object(out, inst.params);
    if (!inst.weights.empty()) {
      out << YAML::Key << "weights" << YAML::Value << YAML::Flow << YAML::BeginSeq;
      for (const auto& w : inst.weights) out << w;
      out << YAML::EndSeq;
    }
    if (!inst.overrides.empty()) {
      out << YAML::Key << "overrides" << YAML::Value << YAML::BeginMap;
      for (const auto& [w, obj] : inst.overrides) {
        out << YAML::Key << w << YAML::Value << YAML::BeginMap;
        emit_object(out, obj);
        out << YAML::EndMap;
      }
      out << YAML::EndMap;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
}

}  // namespace

std::string serialize_recipe(const Recipe& recipe) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "version" << YAML::Value << recipe.version;
  emit_table(out, "pruners", recipe.pruners);
  emit_table(out, "regularizers", recipe.regularizers);
  emit_table(out, "quantizers", recipe.quantizers);
  emit_table(out, "distillers", recipe.distillers);
  out << YAML::Key << "policies" << YAML::Value << YAML::BeginSeq;
  for (const auto& p : recipe.policies) {
    out << YAML::BeginMap;
    out << YAML::Key << policy_kind_name(p.kind) << YAML::Value << YAML::Flow << YAML::BeginMap;
    if (p.kind == PolicyKind::LrStep) {
      emit_object(out, p.params);
    } else {
      out << YAML::Key << "instance_name" << YAML::Value << p.instance_name;
    }
    out << YAML::EndMap;
    out << YAML::Key << "starting_epoch" << YAML::Value << p.starting_epoch;
    out << YAML::Key << "ending_epoch" << YAML::Value << p.ending_epoch;
    out << YAML::Key << "frequency" << YAML::Value << p.frequency;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::string content_digest(std::string_view text) {
  std::string blob = "blob " + std::to_string(text.size());
  blob.push_back('\0');
  blob.append(text);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

}  // namespace nncomp
