// SPDX-License-Identifier: Apache-2.0
#include "nncomp/training.hpp"

#include <cmath>

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"

namespace nncomp {

std::size_t count_correct(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.dim() != 2 || logits.size(0) != labels.size()) {
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.size(0), c = logits.size(1);
  auto v = logits.data();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (v[r * c + k] > v[r * c + best]) best = k;
    }
    if (static_cast<std::int32_t>(best) == labels[r]) ++correct;
  }
  return correct;
}

double evaluate(Model& model, const Dataset& data, std::size_t batch_size) {
  data.validate();
  NoGradGuard guard;
  MinibatchStream stream(data, batch_size, SamplerSpec{}, 0);
  std::size_t correct = 0;
  while (auto b = stream.next()) correct += count_correct(model.forward(b->x, Mode::Eval), b->y);
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<EpochMetrics> train(Model& model, const Dataset& train_set, const Dataset* eval_set,
                                const TrainConfig& config, CompressionScheduler& scheduler) {
  if (config.epochs < 0) throw ContractError("epoch count must be non-negative");
  train_set.validate();
  Sgd optimizer(config.lr, config.momentum);
  scheduler.set_optimizer(&optimizer);
  std::vector<EpochMetrics> history;
  for (std::int64_t i = 0; i < config.epochs; ++i) {
    const std::int64_t epoch = config.first_epoch + i;
    scheduler.on_epoch_begin(epoch);
    MinibatchStream stream(train_set, config.batch_size, config.sampler, static_cast<std::size_t>(epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    std::int64_t mb = 0;
    while (auto batch = stream.next()) {
      scheduler.on_minibatch_begin(mb);
      std::vector<Tensor> heads = model.forward_heads(batch->x, Mode::Train);
      const Tensor& logits = heads.back();
      Tensor loss = cross_entropy(logits, batch->y);
      for (std::size_t h = 0; h + 1 < heads.size(); ++h) {
        loss = add(loss, scale(cross_entropy(heads[h], batch->y), model.exits()[h].loss_weight));
      }
      StepContext ctx{&batch->x, batch->y, &logits};
      Tensor extra = scheduler.before_backward_pass(mb, ctx);
      if (extra.requires_grad()) loss = add(loss, extra);
      NamedTensors params = model.trainable();
      if (model.interceptor()) {
        for (auto& p : model.interceptor()->parameters()) params.push_back(p);
      }
      zero_grads(params);
      backward(loss);
      scheduler.before_parameter_optimization(mb);
      optimizer.step(params);
      scheduler.on_minibatch_end(mb);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
      loss_sum += lv * static_cast<double>(batch->y.size());
      correct += count_correct(logits, batch->y);
      seen += batch->y.size();
      ++mb;
    }
    scheduler.on_epoch_end(epoch);
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    m.lr = optimizer.lr();
    m.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (eval_set) m.eval_accuracy = evaluate(model, *eval_set);
    history.push_back(m);
  }
  scheduler.set_optimizer(nullptr);
  return history;
}

std::vector<EpochMetrics> train(Model& model, const Dataset& train_set, const Dataset* eval_set,
                                const TrainConfig& config) {
  CompressionScheduler neutral(model);
  return train(model, train_set, eval_set, config, neutral);
}

}  // namespace nncomp
