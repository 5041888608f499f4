// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nncomp/analytics.hpp"
#include "nncomp/checkpoint.hpp"
#include "nncomp/data.hpp"
#include "nncomp/distill.hpp"
#include "nncomp/error.hpp"
#include "nncomp/quantization.hpp"
#include "nncomp/recipe.hpp"
#include "nncomp/scheduler.hpp"
#include "nncomp/training.hpp"
#include "nncomp/transforms.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nncomp;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kRecipe = 3, kIo = 4, kNumeric = 5 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string subcommand;
  std::string arch = "mlp-blobs";
  std::string dataset = "blobs";
  std::size_t n_per_class = 250;
  double spread = 0.3;
  std::string train_images, train_labels, eval_images, eval_labels;
  std::int64_t epochs = 15;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double momentum = 0.0;
  std::uint64_t seed = 7;
  std::string recipe;
  std::string checkpoint;
  std::string out = "runs";
  std::string run_id;
  bool parallel = false;
  bool keep_init = false;
  // quantize
  int bits = 8;
  std::string mode = "asymmetric";
  std::string granularity = "tensor";
  std::string clip = "none";
  std::string stats;
  // sensitivity
  std::string levels = "0,0.5,0.9";
  std::string prune_granularity = "element";
  // summary
  bool sparsity = false;
  bool macs = false;
  bool apoz = false;
  // svd
  std::string layer;
  std::size_t rank = 1;
};

json resolved(const RunConfig& c) {
  json j{{"subcommand", c.subcommand}, {"arch", c.arch},       {"dataset", c.dataset},
         {"seed", c.seed},             {"out", c.out},         {"run_id", c.run_id},
         {"parallel", c.parallel},     {"checkpoint", c.checkpoint}};
  if (c.dataset == "blobs") {
    j["n_per_class"] = c.n_per_class;
    j["spread"] = c.spread;
  } else {
    j["train_images"] = c.train_images;
    j["train_labels"] = c.train_labels;
    j["eval_images"] = c.eval_images;
    j["eval_labels"] = c.eval_labels;
  }
  const std::string& s = c.subcommand;
  if (s == "train" || s == "compress") {
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["recipe"] = c.recipe;
    j["keep_init"] = c.keep_init;
  }
  if (s == "quantize") {
    j["bits"] = c.bits;
    j["mode"] = c.mode;
    j["granularity"] = c.granularity;
    j["clip"] = c.clip;
    j["stats"] = c.stats;
  }
  if (s == "sensitivity") {
    j["levels"] = c.levels;
    j["granularity"] = c.prune_granularity;
  }
  if (s == "summary") {
    j["sparsity"] = c.sparsity;
    j["macs"] = c.macs;
    j["apoz"] = c.apoz;
  }
  if (s == "svd") {
    j["layer"] = c.layer;
    j["rank"] = c.rank;
  }
  return j;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed: " + p.string());
}

class Run {
 public:
  explicit Run(RunConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.run_id.empty()) cfg_.run_id = cfg_.subcommand + "-" + cfg_.arch + "-s" + std::to_string(cfg_.seed);
    dir_ = fs::path(cfg_.out) / cfg_.run_id;
  }

  const RunConfig& cfg() const { return cfg_; }
  const fs::path& dir() const { return dir_; }

  void start() {
    std::cout << "resolved config:\n" << resolved(cfg_).dump(2) << "\n";
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
  }

  fs::path artifact(const std::string& name) {
    artifacts_.push_back(name);
    return dir_ / name;
  }

  fs::path report(const std::string& report, const CsvTable& table) {
    fs::path p = write_report(dir_, cfg_.run_id, report, table);
    artifacts_.push_back(p.filename().string());
    return p;
  }

  void finish(const json& results = json::object()) {
    json m;
    m["run_id"] = cfg_.run_id;
    m["subcommand"] = cfg_.subcommand;
    m["seed"] = cfg_.seed;
    m["flags"] = resolved(cfg_);
    m["recipe_digest"] = recipe_digest.empty() ? json(nullptr) : json(recipe_digest);
    m["artifacts"] = artifacts_;
    m["results"] = results;
    write_text(dir_ / "manifest.json", m.dump(2) + "\n");
    std::cout << "artifacts written to " << dir_.string() << "\n";
  }

  std::string recipe_digest;

 private:
  RunConfig cfg_;
  fs::path dir_;
  std::vector<std::string> artifacts_;
};

std::pair<Dataset, Dataset> load_data(const RunConfig& c) {
  if (c.dataset == "blobs") {
    if (c.arch != "mlp-blobs") throw ConfigError("the blobs dataset needs --arch mlp-blobs");
    if (c.n_per_class == 0) throw ConfigError("--n-per-class must be >= 1");
    if (!(c.spread >= 0.0)) throw ConfigError("--spread must be >= 0");
    return {gen_blobs(c.n_per_class, 4, c.spread, c.seed), gen_blobs(c.n_per_class, 4, c.spread, c.seed + 1)};
  }
  if (c.dataset == "idx") {
    if (c.arch == "mlp-blobs") throw ConfigError("the idx dataset needs a convolutional --arch");
    if (c.train_images.empty() || c.train_labels.empty()) {
      throw ConfigError("--train-images and --train-labels are required with --dataset idx");
    }
    Dataset tr = load_idx_dataset(c.train_images, c.train_labels);
    Dataset ev = c.eval_images.empty() ? tr : load_idx_dataset(c.eval_images, c.eval_labels);
    return {std::move(tr), std::move(ev)};
  }
  throw ConfigError("unknown dataset '" + c.dataset + "'");
}

Checkpoint load_or_build(const RunConfig& c, bool required) {
  if (!c.checkpoint.empty()) return load_checkpoint(c.checkpoint);
  if (required) throw ConfigError("--checkpoint is required for " + c.subcommand);
  Checkpoint ck;
  ck.model = build_model(c.arch, c.seed);
  ck.meta.seed = c.seed;
  return ck;
}

CsvTable metrics_table(const std::vector<EpochMetrics>& history) {
  CsvTable t;
  t.header = {"epoch", "loss", "lr", "train_accuracy", "eval_accuracy"};
  for (const auto& m : history) {
    t.rows.push_back({std::to_string(m.epoch), format_double(m.loss), format_double(m.lr),
                      format_double(m.train_accuracy), format_double(m.eval_accuracy)});
  }
  return t;
}

int train_like(Run& run, bool compress) {
  const RunConfig& c = run.cfg();
  if (compress && c.recipe.empty()) throw ConfigError("compress needs --recipe");
  if (c.epochs < 0) throw ConfigError("--epochs must be >= 0");
  if (c.batch_size == 0) throw ConfigError("--batch-size must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("--lr must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("--momentum must lie in [0, 1)");
  auto [train_set, eval_set] = load_data(c);
  Checkpoint ck = load_or_build(c, compress);
  Model& model = ck.model;
  if (model.name() != c.arch && c.checkpoint.empty()) throw ConfigError("architecture mismatch");
  std::optional<Recipe> recipe;
  if (!c.recipe.empty()) {
    const std::string text = read_text(c.recipe);
    run.recipe_digest = content_digest(text);
    recipe = parse_recipe(text);
  }
  run.start();
  if (c.keep_init && !ck.meta.lth_initial) ck.meta.lth_initial = lth_snapshot(model).initial;
  auto loader = [](const std::string& path) { return load_checkpoint(path).model; };
  CompressionScheduler sched = recipe ? CompressionScheduler(model, *recipe, loader) : CompressionScheduler(model);
  sched.set_masks(ck.masks);
  TrainConfig tc;
  tc.epochs = c.epochs;
  tc.batch_size = c.batch_size;
  tc.lr = c.lr;
  tc.momentum = c.momentum;
  tc.sampler = SamplerSpec{SamplerKind::Shuffled, 1.0, c.seed};
  const double before = compress ? evaluate(model, eval_set) : -1.0;
  auto history = train(model, train_set, &eval_set, tc, sched);
  const double acc = evaluate(model, eval_set);
  std::cout << "eval accuracy: " << format_double(acc) << "\n";

  ck.masks = sched.masks();
  ck.meta.epoch = c.epochs;
  ck.meta.seed = c.seed;
  ck.meta.recipe_digest = run.recipe_digest;
  if (sched.qat()) ck.meta.quant = sched.qat()->describe();
  model.set_interceptor(nullptr);
  save_checkpoint(model, ck.masks, ck.meta, run.artifact("model.dckp"));
  run.report("events", sched.event_table());
  run.report("metrics", metrics_table(history));
  SparsityReport sp = sparsity_summary(model, ck.masks);
  run.report("sparsity", to_csv(sp));
  json results{{"eval_accuracy", acc}, {"weight_sparsity", sp.totals.sparsity()}};
  if (compress) results["eval_accuracy_before"] = before;
  run.finish(results);
  return kOk;
}

int cmd_quantize(Run& run) {
  const RunConfig& c = run.cfg();
  if (c.bits < 2 || c.bits > 8) throw ConfigError("--bits must lie in [2, 8]");
  PtqConfig pc;
  pc.bits = c.bits;
  pc.mode = parse_quant_mode(c.mode);
  if (c.granularity != "tensor" && c.granularity != "channel") throw ConfigError("--granularity must be tensor or channel");
  pc.per_channel = c.granularity == "channel";
  pc.clip = parse_clip_mode(c.clip);
  auto [train_set, eval_set] = load_data(c);
  Checkpoint ck = load_or_build(c, true);
  run.start();
  CalibrationStats stats = c.stats.empty() ? calibrate(ck.model, train_set, 256)
                                           : calibration_from_json(json::parse(read_text(c.stats)));
  write_text(run.artifact("calibration.json"), calibration_to_json(stats).dump(2) + "\n");
  PtqModel q(ck.model, stats, pc);
  const double fp = evaluate(ck.model, eval_set);
  MinibatchStream s(eval_set, 256, SamplerSpec{}, 0);
  std::size_t correct = 0;
  while (auto b = s.next()) correct += count_correct(q.forward(b->x), b->y);
  const double qa = static_cast<double>(correct) / static_cast<double>(eval_set.size());
  std::cout << "float accuracy: " << format_double(fp) << "\nquantized accuracy: " << format_double(qa) << "\n";
  write_text(run.artifact("quant.json"), q.describe().dump(2) + "\n");
  ck.meta.quant = q.describe();
  save_checkpoint(ck.model, ck.masks, ck.meta, run.artifact("model.dckp"));
  CsvTable t;
  t.header = {"bits", "mode", "granularity", "clip", "float_accuracy", "quantized_accuracy"};
  t.rows.push_back({std::to_string(c.bits), c.mode, c.granularity, c.clip, format_double(fp), format_double(qa)});
  run.report("quantize", t);
  run.finish({{"float_accuracy", fp}, {"quantized_accuracy", qa}});
  return kOk;
}

int cmd_eval(Run& run) {
  const RunConfig& c = run.cfg();
  auto [train_set, eval_set] = load_data(c);
  Checkpoint ck = load_or_build(c, true);
  run.start();
  const double acc = evaluate(ck.model, eval_set);
  std::cout << "eval accuracy: " << format_double(acc) << "\n";
  CsvTable t;
  t.header = {"samples", "accuracy"};
  t.rows.push_back({std::to_string(eval_set.size()), format_double(acc)});
  run.report("eval", t);
  run.finish({{"eval_accuracy", acc}});
  return kOk;
}

Granularity parse_prune_granularity(const std::string& s) {
  if (s == "element") return Granularity::element();
  if (s == "filter") return Granularity::filter();
  throw ConfigError("--granularity must be element or filter");
}

std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad level '" + item + "' in --levels");
    }
  }
  if (out.empty()) throw ConfigError("--levels is empty");
  for (double v : out) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError("--levels entries must lie in [0, 1)");
  }
  return out;
}

int cmd_sensitivity(Run& run) {
  const RunConfig& c = run.cfg();
  std::vector<double> levels = parse_levels(c.levels);
  Granularity g = parse_prune_granularity(c.prune_granularity);
  auto [train_set, eval_set] = load_data(c);
  Checkpoint ck = load_or_build(c, false);
  run.start();
  auto rows = sensitivity_scan(ck.model, eval_set, levels, g);
  run.report("sensitivity", to_csv(rows));
  run.finish({{"rows", rows.size()}});
  return kOk;
}

int cmd_summary(Run& run) {
  RunConfig c = run.cfg();
  Checkpoint ck = load_or_build(c, false);
  const bool none = !c.sparsity && !c.macs && !c.apoz;
  run.start();
  json results = json::object();
  if (c.sparsity || none) {
    SparsityReport sp = sparsity_summary(ck.model, ck.masks);
    run.report("sparsity", to_csv(sp));
    std::cout << "total weight sparsity: " << format_double(sp.totals.sparsity()) << "\n";
    results["weight_sparsity"] = sp.totals.sparsity();
  }
  if (c.macs || none) {
    CostReport cr = macs_params_summary(ck.model, ck.model.sample_shape());
    run.report("macs", to_csv(cr));
    std::cout << "params: " << cr.total_params << ", MACs per sample: " << cr.total_macs << "\n";
    results["params"] = cr.total_params;
    results["macs"] = cr.total_macs;
  }
  if (c.apoz) {
    auto [train_set, eval_set] = load_data(c);
    run.report("apoz", to_csv(activation_stats(ck.model, eval_set)));
  }
  run.finish(results);
  return kOk;
}

int save_transformed(Run& run, const Checkpoint& src, const Model& model, const MaskSet& masks) {
  CheckpointMeta meta = src.meta;
  meta.lth_initial.reset();
  save_checkpoint(model, masks, meta, run.artifact("model.dckp"));
  CostReport before = macs_params_summary(src.model, src.model.sample_shape());
  CostReport after = macs_params_summary(model, model.sample_shape());
  run.report("macs", to_csv(after));
  std::cout << "params " << before.total_params << " -> " << after.total_params << ", MACs " << before.total_macs
            << " -> " << after.total_macs << "\n";
  run.finish({{"params_before", before.total_params},
              {"params_after", after.total_params},
              {"macs_before", before.total_macs},
              {"macs_after", after.total_macs}});
  return kOk;
}

int cmd_svd(Run& run) {
  const RunConfig& c = run.cfg();
  if (c.layer.empty()) throw ConfigError("svd needs --layer");
  Checkpoint ck = load_or_build(c, true);
  run.start();
  Model m = truncated_svd_replace(ck.model, c.layer, c.rank);
  MaskSet masks = ck.masks;
  masks.erase(c.layer + ".weight");
  masks.erase(c.layer + ".bias");
  return save_transformed(run, ck, m, masks);
}

int cmd_thin(Run& run) {
  Checkpoint ck = load_or_build(run.cfg(), true);
  run.start();
  ThinningPlan plan = plan_thinning(ck.model, ck.masks);
  json jp = json::array();
  for (const auto& s : plan.steps) {
    jp.push_back({{"producer", s.producer}, {"channels", s.channels}, {"batchnorms", s.batchnorms}, {"consumer", s.consumer}});
  }
  write_text(run.artifact("thinning_plan.json"), jp.dump(2) + "\n");
  MaskSet masks = ck.masks;
  Model m = apply_thinning(ck.model, plan, &masks);
  return save_transformed(run, ck, m, masks);
}

int cmd_fold_bn(Run& run) {
  Checkpoint ck = load_or_build(run.cfg(), true);
  run.start();
  Model m = fold_batchnorm(ck.model);
  MaskSet masks;
  for (const auto& [name, mask] : ck.masks) {
    if (m.has_param(name) && m.param(name).shape() == mask.values.shape()) masks.emplace(name, mask);
  }
  return save_transformed(run, ck, m, masks);
}

void add_common(CLI::App* sub, RunConfig& c) {
  sub->add_option("--arch", c.arch, "Architecture id (mlp-blobs, cnn-tiny, cnn-tiny-bn)")->capture_default_str();
  sub->add_option("--dataset", c.dataset, "blobs or idx")->capture_default_str();
  sub->add_option("--n-per-class", c.n_per_class, "Blob samples per class")->capture_default_str();
  sub->add_option("--spread", c.spread, "Blob standard deviation")->capture_default_str();
  sub->add_option("--train-images", c.train_images, "IDX image file for training");
  sub->add_option("--train-labels", c.train_labels, "IDX label file for training");
  sub->add_option("--eval-images", c.eval_images, "IDX image file for evaluation");
  sub->add_option("--eval-labels", c.eval_labels, "IDX label file for evaluation");
  sub->add_option("--seed", c.seed, "Master seed")->capture_default_str();
  sub->add_option("--checkpoint", c.checkpoint, "Input checkpoint");
  sub->add_option("--out", c.out, "Artifact root directory")->capture_default_str();
  sub->add_option("--run-id", c.run_id, "Run id (default <subcommand>-<arch>-s<seed>)");
  sub->add_flag("--parallel", c.parallel, "Allow multi-threaded kernels (drops bit-exactness)");
}

void add_training(CLI::App* sub, RunConfig& c) {
  sub->add_option("--epochs", c.epochs, "Epochs")->capture_default_str();
  sub->add_option("--batch-size", c.batch_size, "Minibatch size")->capture_default_str();
  sub->add_option("--lr", c.lr, "Learning rate")->capture_default_str();
  sub->add_option("--momentum", c.momentum, "SGD momentum")->capture_default_str();
  sub->add_option("--recipe", c.recipe, "Compression schedule (YAML)");
  sub->add_flag("--keep-init", c.keep_init, "Store initial weights for lottery-ticket rewinding");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nncomp: neural-network compression toolkit"};
  app.require_subcommand(1);
  RunConfig c;

  auto* train_cmd = app.add_subcommand("train", "Train a model, optionally under a compression recipe");
  add_common(train_cmd, c);
  add_training(train_cmd, c);
  auto* compress_cmd = app.add_subcommand("compress", "Continue training a checkpoint under a recipe");
  add_common(compress_cmd, c);
  add_training(compress_cmd, c);
  compress_cmd->get_option("--epochs")->default_val(15);

  auto* quant_cmd = app.add_subcommand("quantize", "Post-training quantization");
  add_common(quant_cmd, c);
  quant_cmd->add_option("--bits", c.bits, "Bit width in [2, 8]")->capture_default_str();
  quant_cmd->add_option("--mode", c.mode, "symmetric or asymmetric")->capture_default_str();
  quant_cmd->add_option("--granularity", c.granularity, "tensor or channel")->capture_default_str();
  quant_cmd->add_option("--clip", c.clip, "none, avg or aciq")->capture_default_str();
  quant_cmd->add_option("--stats", c.stats, "Calibration statistics JSON to use instead of calibrating");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval_cmd, c);

  auto* sens_cmd = app.add_subcommand("sensitivity", "Per-layer pruning sensitivity scan");
  add_common(sens_cmd, c);
  sens_cmd->add_option("--levels", c.levels, "Comma-separated sparsity levels")->capture_default_str();
  sens_cmd->add_option("--granularity", c.prune_granularity, "element or filter")->capture_default_str();

  auto* sum_cmd = app.add_subcommand("summary", "Model summaries");
  add_common(sum_cmd, c);
  sum_cmd->add_flag("--sparsity", c.sparsity, "Per-parameter sparsity");
  sum_cmd->add_flag("--macs", c.macs, "Parameters and MACs per layer");
  sum_cmd->add_flag("--apoz", c.apoz, "Activation APoZ per channel");

  auto* svd_cmd = app.add_subcommand("svd", "Replace a linear layer by a truncated SVD pair");
  add_common(svd_cmd, c);
  svd_cmd->add_option("--layer", c.layer, "Linear layer id");
  svd_cmd->add_option("--rank", c.rank, "Kept rank")->capture_default_str();

  auto* thin_cmd = app.add_subcommand("thin", "Remove zeroed filters and their dependents");
  add_common(thin_cmd, c);
  auto* fold_cmd = app.add_subcommand("fold-bn", "Fold batch norm into the preceding convolutions");
  add_common(fold_cmd, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  c.subcommand = app.get_subcommands().front()->get_name();
  set_deterministic(!c.parallel);

  try {
    Run run(c);
    const std::string& s = c.subcommand;
    if (s == "train") return train_like(run, false);
    if (s == "compress") return train_like(run, true);
    if (s == "quantize") return cmd_quantize(run);
    if (s == "eval") return cmd_eval(run);
    if (s == "sensitivity") return cmd_sensitivity(run);
    if (s == "summary") return cmd_summary(run);
    if (s == "svd") return cmd_svd(run);
    if (s == "thin") return cmd_thin(run);
    if (s == "fold-bn") return cmd_fold_bn(run);
    return kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const RecipeError& e) {
    std::cerr << "recipe error: " << e.what() << "\n";
    return kRecipe;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
}
