// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nncomp/csv.hpp"
#include "nncomp/distill.hpp"
#include "nncomp/mask.hpp"
#include "nncomp/model.hpp"
#include "nncomp/optim.hpp"
#include "nncomp/qat.hpp"
#include "nncomp/recipe.hpp"

namespace nncomp {

struct SchedulerEvent {
  std::int64_t epoch = 0;
  /// -1 for epoch-level callbacks.
  std::int64_t minibatch = -1;
  std::string callback;
  std::string policy;
  std::string action;

  bool operator==(const SchedulerEvent&) const = default;
};

/// Inputs available to before_backward_pass.
struct StepContext {
  const Tensor* x = nullptr;
  std::span<const std::int32_t> labels;
  const Tensor* logits = nullptr;
};

/// Loads a teacher model named by a distiller's `teacher` parameter.
using TeacherLoader = std::function<Model(const std::string& path)>;

/// Algorithm 1 callback engine. Callbacks must arrive in the order
///   on_epoch_begin, { on_minibatch_begin, before_backward_pass,
///   before_parameter_optimization, on_minibatch_end }*, on_epoch_end
/// and a ContractError is thrown otherwise. Each callback appends one event
/// per acting policy, or a single "-"/"noop" event.
///
/// Masks persist after their pruner's window closes and are re-applied at
/// on_minibatch_begin, before_parameter_optimization and on_minibatch_end
/// for as long as any mask is live.
class CompressionScheduler {
 public:
  /// Neutral scheduler: no policies.
  explicit CompressionScheduler(Model& model);
  /// Binds `recipe` to `model`; every target weight must exist.
  CompressionScheduler(Model& model, Recipe recipe, TeacherLoader loader = {});

  void set_optimizer(Sgd* optimizer) noexcept { optimizer_ = optimizer; }
  void set_teacher(const std::string& distiller, Model teacher);

  void on_epoch_begin(std::int64_t epoch);
  void on_minibatch_begin(std::int64_t minibatch);
  /// Sum of active regularizer penalties and distillation terms; an
  /// untracked scalar 0 when nothing contributes.
  Tensor before_backward_pass(std::int64_t minibatch, const StepContext& ctx);
  void before_parameter_optimization(std::int64_t minibatch);
  void on_minibatch_end(std::int64_t minibatch);
  void on_epoch_end(std::int64_t epoch);

  const Recipe& recipe() const noexcept { return recipe_; }
  const MaskSet& masks() const noexcept { return masks_; }
  void set_masks(MaskSet masks);
  const std::vector<SchedulerEvent>& events() const noexcept { return events_; }
  /// Columns: epoch, minibatch, callback, policy, action.
  CsvTable event_table() const;
  const std::shared_ptr<QatInterceptor>& qat() const noexcept { return qat_; }

 private:
  enum class Phase { Idle, Epoch, Minibatch, Backward, Optimize };

  void expect(Phase phase, const char* callback, std::int64_t minibatch) const;
  void log(const char* callback, std::int64_t minibatch, const std::string& policy, const std::string& action);
  void reapply_masks(const char* callback, std::int64_t minibatch);
  void recompute_masks(const Policy& policy);
  void bind();

  Model* model_;
  Recipe recipe_;
  TeacherLoader loader_;
  Sgd* optimizer_ = nullptr;
  MaskSet masks_;
  std::map<std::string, Model> teachers_;
  std::shared_ptr<QatInterceptor> qat_;
  std::vector<SchedulerEvent> events_;
  Phase phase_ = Phase::Idle;
  std::int64_t epoch_ = -1;
  std::int64_t minibatch_ = -1;
};

/// Event log as CSV text.
std::string events_to_csv(const std::vector<SchedulerEvent>& events);

}  // namespace nncomp
