// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "nncomp/data.hpp"
#include "nncomp/model.hpp"
#include "nncomp/optim.hpp"
#include "nncomp/scheduler.hpp"

namespace nncomp {

struct TrainConfig {
  std::int64_t epochs = 1;
  /// Epoch number of the first loop iteration, as seen by the scheduler.
  std::int64_t first_epoch = 0;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double momentum = 0.0;
  SamplerSpec sampler{SamplerKind::Shuffled, 1.0, 0};
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double train_accuracy = 0.0;
  /// Negative when no evaluation set was given.
  double eval_accuracy = -1.0;
};

/// Algorithm 1: per epoch, on_epoch_begin; per minibatch, on_minibatch_begin,
/// forward, loss + before_backward_pass, clear gradients, backward,
/// before_parameter_optimization, optimizer step, on_minibatch_end; then
/// on_epoch_end. With exit branches the loss is CE of the final head plus
/// the weighted CE of every exit.
std::vector<EpochMetrics> train(Model& model, const Dataset& train_set, const Dataset* eval_set,
                                const TrainConfig& config, CompressionScheduler& scheduler);

/// Same loop with a neutral scheduler.
std::vector<EpochMetrics> train(Model& model, const Dataset& train_set, const Dataset* eval_set,
                                const TrainConfig& config);

/// Top-1 accuracy of eval-mode forwards over the whole set.
double evaluate(Model& model, const Dataset& data, std::size_t batch_size = 256);

/// Count of rows whose argmax (first maximum) equals the label.
std::size_t count_correct(const Tensor& logits, std::span<const std::int32_t> labels);

}  // namespace nncomp
