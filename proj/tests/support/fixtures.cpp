// SPDX-License-Identifier: Apache-2.0
#include "nncomp/recipe.hpp"
#include "nncomp/scheduler.hpp"
#include "nncomp/training.hpp"
#include "testing.hpp"

namespace nncomp::testing {

std::string fixture_trace(const std::filesystem::path& recipe_path) {
  Model m = build_model("mlp-blobs", 7);
  Recipe r = load_recipe(recipe_path);
  CompressionScheduler s(m, r, [](const std::string&) { return build_model("mlp-blobs", 99); });
  Dataset ds = gen_blobs(2, 4, 0.3, 1);
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.batch_size = 4;
  cfg.lr = 0.05;
  cfg.sampler = SamplerSpec{SamplerKind::Shuffled, 1.0, 3};
  train(m, ds, nullptr, cfg, s);
  return events_to_csv(s.events());
}

}  // namespace nncomp::testing
