// SPDX-License-Identifier: Apache-2.0
#include "nncomp/scheduler.hpp"

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"
#include "nncomp/pruning.hpp"
#include "nncomp/regularization.hpp"

namespace nncomp {

namespace {

Granularity pruner_granularity(const InstanceSpec& inst) {
  if (inst.cls == "filter_l1") return Granularity::filter();
  if (inst.cls == "block") {
    return Granularity::block(static_cast<std::size_t>(inst.number("block_rows")),
                              static_cast<std::size_t>(inst.number("block_cols")));
  }
  const std::string g = inst.text_or("granularity", "element");
  if (g == "filter") return Granularity::filter();
  if (g == "block") {
    return Granularity::block(static_cast<std::size_t>(inst.number("block_rows")),
                              static_cast<std::size_t>(inst.number("block_cols")));
  }
  return Granularity::element();
}

LassoGrouping lasso_grouping(const InstanceSpec& inst) {
  const std::string g = inst.text_or("grouping", "filter");
  if (g == "channel") return {LassoGrouping::Kind::Channel, 1, 1};
  if (g == "block") {
    return {LassoGrouping::Kind::Block, static_cast<std::size_t>(inst.number("block_rows")),
            static_cast<std::size_t>(inst.number("block_cols"))};
  }
  return {LassoGrouping::Kind::Filter, 1, 1};
}

QatConfig qat_config(const InstanceSpec& inst) {
  QatConfig c;
  c.bits = static_cast<int>(inst.number("bits"));
  if (inst.cls == "pact") {
    c.method = QatMethod::Pact;
    c.pact_alpha_init = inst.number_or("alpha_init", c.pact_alpha_init);
  } else {
    c.method = inst.cls == "dorefa" ? QatMethod::Dorefa : QatMethod::Ema;
    c.ema_decay = inst.number_or("ema_decay", c.ema_decay);
  }
  return c;
}

DistillSpec distill_spec(const InstanceSpec& inst) {
  return DistillSpec{inst.number("temperature"), inst.number("student_weight"), inst.number("distill_weight")};
}

[[noreturn]] void bind_fail(RecipeError::Kind kind, const SourceLoc& loc, const std::string& msg) {
  throw RecipeError(kind, loc.str() + ": " + msg);
}

}  // namespace

CompressionScheduler::CompressionScheduler(Model& model) : model_(&model) {}

CompressionScheduler::CompressionScheduler(Model& model, Recipe recipe, TeacherLoader loader)
    : model_(&model), recipe_(std::move(recipe)), loader_(std::move(loader)) {
  bind();
}

void CompressionScheduler::bind() {
  auto check_weights = [&](const InstanceSpec& inst) {
    for (const auto& w : inst.weights) {
      if (!model_->has_param(w)) {
        bind_fail(RecipeError::Kind::UnknownParameter, inst.loc,
                  "instance '" + inst.name + "' targets unknown parameter '" + w + "'");
      }
    }
  };
  for (const auto& inst : recipe_.pruners) {
    check_weights(inst);
    const Granularity g = pruner_granularity(inst);
    for (const auto& w : inst.weights) {
      const Shape& shape = model_->param(w).shape();
      try {
        Grouping grouping = make_grouping(shape, g);
        if (inst.cls == "filter_l1" && inst.number("filters_to_prune", w) > static_cast<double>(grouping.groups)) {
          bind_fail(RecipeError::Kind::OutOfRange, inst.loc,
                    "instance '" + inst.name + "' prunes more filters than '" + w + "' has");
        }
      } catch (const DimensionError& e) {
        bind_fail(RecipeError::Kind::OutOfRange, inst.loc, "instance '" + inst.name + "': " + e.what());
      }
    }
  }
  for (const auto& inst : recipe_.regularizers) {
    check_weights(inst);
    if (inst.cls != "group_lasso") continue;
    for (const auto& w : inst.weights) {
      try {
        make_lasso_grouping(model_->param(w).shape(), lasso_grouping(inst));
      } catch (const DimensionError& e) {
        bind_fail(RecipeError::Kind::OutOfRange, inst.loc, "instance '" + inst.name + "': " + e.what());
      }
    }
  }
  for (const auto& inst : recipe_.quantizers) check_weights(inst);
  for (const auto& inst : recipe_.distillers) {
    check_weights(inst);
    const std::string path = inst.text_or("teacher", "");
    if (!path.empty() && loader_) teachers_.emplace(inst.name, loader_(path));
  }
  for (const auto& p : recipe_.policies) {
    if (p.kind == PolicyKind::Pruner && recipe_.instance(p).cls == "agp" && p.ending_epoch <= p.starting_epoch) {
      bind_fail(RecipeError::Kind::OutOfRange, p.loc,
                "AGP policy '" + p.instance_name + "' needs ending_epoch > starting_epoch");
    }
  }
}

void CompressionScheduler::set_teacher(const std::string& distiller, Model teacher) {
  teachers_.insert_or_assign(distiller, std::move(teacher));
}

void CompressionScheduler::set_masks(MaskSet masks) {
  for (const auto& [name, m] : masks) {
    if (!model_->has_param(name)) throw ContractError("mask refers to unknown parameter '" + name + "'");
    if (model_->param(name).shape() != m.values.shape()) {
      throw DimensionError("mask for '" + name + "' does not match the parameter shape");
    }
  }
  masks_ = std::move(masks);
}

void CompressionScheduler::expect(Phase phase, const char* callback, std::int64_t minibatch) const {
  if (phase_ != phase) {
    throw ContractError(std::string("scheduler callback ") + callback + " invoked out of order");
  }
  if (minibatch >= 0 && phase != Phase::Epoch && minibatch != minibatch_) {
    throw ContractError(std::string("scheduler callback ") + callback + " for minibatch " +
                        std::to_string(minibatch) + " inside minibatch " + std::to_string(minibatch_));
  }
}

void CompressionScheduler::log(const char* callback, std::int64_t minibatch, const std::string& policy,
                               const std::string& action) {
  events_.push_back(SchedulerEvent{epoch_, minibatch, callback, policy, action});
}

void CompressionScheduler::recompute_masks(const Policy& policy) {
  const InstanceSpec& inst = recipe_.instance(policy);
  const Granularity g = pruner_granularity(inst);
  for (const auto& w : inst.weights) {
    const Tensor& param = model_->param(w);
    Mask m;
    if (inst.cls == "sensitivity_magnitude") {
      m = sensitivity_magnitude_mask(param, inst.number("sensitivity", w), w);
    } else if (inst.cls == "level" || inst.cls == "block") {
      m = level_mask(param, inst.number("level", w), g, w);
    } else if (inst.cls == "agp") {
      AgpState st;
      st.initial = inst.number("initial_sparsity", w);
      st.final = inst.number("final_sparsity", w);
      st.start_epoch = static_cast<double>(policy.starting_epoch);
      st.duration = static_cast<double>(policy.ending_epoch - policy.starting_epoch);
      st.frequency = static_cast<double>(policy.frequency);
      st.validate();
      m = level_mask(param, agp_target(st, static_cast<double>(epoch_)), g, w);
    } else if (inst.cls == "filter_l1") {
      m = prune_lowest_groups(param, static_cast<std::size_t>(inst.number("filters_to_prune", w)), g, w);
    } else if (inst.cls == "surgery") {
      auto it = masks_.find(w);
      Mask prev = it != masks_.end() ? it->second : ones_mask(param, w);
      m = surgery_update(param, prev, inst.number("threshold", w), inst.number("a", w), inst.number("b", w));
    } else {
      throw ContractError("unknown pruner class '" + inst.cls + "'");
    }
    masks_.insert_or_assign(w, std::move(m));
  }
}

void CompressionScheduler::reapply_masks(const char* callback, std::int64_t minibatch) {
  if (masks_.empty()) {
    log(callback, minibatch, "-", "noop");
    return;
  }
  apply_masks(*model_, masks_);
  bool any = false;
  for (const auto& p : recipe_.policies) {
    if (p.kind == PolicyKind::Pruner && epoch_ >= p.starting_epoch && epoch_ <= p.ending_epoch) {
      log(callback, minibatch, p.label(), "apply_masks");
      any = true;
    }
  }
  if (!any) log(callback, minibatch, "-", "apply_masks");
}

void CompressionScheduler::on_epoch_begin(std::int64_t epoch) {
  expect(Phase::Idle, "on_epoch_begin", -1);
  if (epoch < 0) throw ContractError("epoch must be non-negative");
  epoch_ = epoch;
  minibatch_ = -1;
  const std::size_t before = events_.size();
  for (const auto& p : recipe_.policies) {
    switch (p.kind) {
      case PolicyKind::Pruner:
        if (p.active_at(epoch)) {
          recompute_masks(p);
          log("on_epoch_begin", -1, p.label(), "recompute_masks");
        }
        break;
      case PolicyKind::Quantizer:
        if (epoch == p.starting_epoch) {
          qat_ = std::make_shared<QatInterceptor>(*model_, qat_config(recipe_.instance(p)));
          model_->set_interceptor(qat_);
          log("on_epoch_begin", -1, p.label(), "enable_qat");
        }
        break;
      case PolicyKind::LrStep:
        if (p.active_at(epoch)) {
          if (!optimizer_) throw ContractError("lr_step policy needs an optimizer bound to the scheduler");
          optimizer_->set_lr(optimizer_->lr() * p.params.at("gamma").get<double>());
          log("on_epoch_begin", -1, p.label(), "lr_step");
        }
        break;
      case PolicyKind::Regularizer:
      case PolicyKind::Distiller:
        break;
    }
  }
  if (events_.size() == before) log("on_epoch_begin", -1, "-", "noop");
  phase_ = Phase::Epoch;
}

void CompressionScheduler::on_minibatch_begin(std::int64_t minibatch) {
  expect(Phase::Epoch, "on_minibatch_begin", minibatch);
  minibatch_ = minibatch;
  reapply_masks("on_minibatch_begin", minibatch);
  phase_ = Phase::Minibatch;
}

Tensor CompressionScheduler::before_backward_pass(std::int64_t minibatch, const StepContext& ctx) {
  expect(Phase::Minibatch, "before_backward_pass", minibatch);
  Tensor total;
  auto accumulate = [&](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
  const std::size_t before = events_.size();
  for (const auto& p : recipe_.policies) {
    if (!p.active_at(epoch_)) continue;
    if (p.kind == PolicyKind::Regularizer) {
      const InstanceSpec& inst = recipe_.instance(p);
      bool acted = false;
      for (const auto& w : inst.weights) {
        const double strength = inst.number("strength", w);
        if (strength == 0.0) continue;
        const Tensor& param = model_->param(w);
        if (inst.cls == "lp") {
          accumulate(lp_penalty(param, strength, static_cast<int>(inst.number("p", w))));
        } else {
          accumulate(group_lasso_penalty(param, strength, lasso_grouping(inst)));
        }
        acted = true;
      }
      if (acted) log("before_backward_pass", minibatch, p.label(), "penalty");
    } else if (p.kind == PolicyKind::Distiller) {
      const InstanceSpec& inst = recipe_.instance(p);
      if (!ctx.x || !ctx.logits) throw ContractError("distillation needs the minibatch input and student logits");
      auto it = teachers_.find(inst.name);
      if (it == teachers_.end()) throw ContractError("distiller '" + inst.name + "' has no teacher model");
      Tensor teacher_logits;
      {
        NoGradGuard guard;
        teacher_logits = it->second.forward(*ctx.x, Mode::Eval);
      }
      DistillSpec spec = distill_spec(inst);
      bool acted = false;
      if (spec.student_weight != 1.0) {
        accumulate(scale(cross_entropy(*ctx.logits, ctx.labels), spec.student_weight - 1.0));
        acted = true;
      }
      if (spec.distill_weight != 0.0) {
        accumulate(kd_soft_term(*ctx.logits, teacher_logits, spec));
        acted = true;
      }
      if (acted) log("before_backward_pass", minibatch, p.label(), "distill");
    }
  }
  if (events_.size() == before) log("before_backward_pass", minibatch, "-", "noop");
  phase_ = Phase::Backward;
  return total.defined() ? total : Tensor::scalar(0.0, model_->dtype());
}

void CompressionScheduler::before_parameter_optimization(std::int64_t minibatch) {
  expect(Phase::Backward, "before_parameter_optimization", minibatch);
  reapply_masks("before_parameter_optimization", minibatch);
  phase_ = Phase::Optimize;
}

void CompressionScheduler::on_minibatch_end(std::int64_t minibatch) {
  expect(Phase::Optimize, "on_minibatch_end", minibatch);
  if (qat_ && qat_->config().method == QatMethod::Pact) qat_->clamp_alphas();
  reapply_masks("on_minibatch_end", minibatch);
  phase_ = Phase::Epoch;
}

void CompressionScheduler::on_epoch_end(std::int64_t epoch) {
  expect(Phase::Epoch, "on_epoch_end", -1);
  if (epoch != epoch_) {
    throw ContractError("on_epoch_end(" + std::to_string(epoch) + ") does not close epoch " + std::to_string(epoch_));
  }
  log("on_epoch_end", -1, "-", "noop");
  phase_ = Phase::Idle;
}

namespace {

CsvTable events_table(const std::vector<SchedulerEvent>& events) {
  CsvTable t;
  t.header = {"epoch", "minibatch", "callback", "policy", "action"};
  for (const auto& e : events) {
    t.rows.push_back({std::to_string(e.epoch), std::to_string(e.minibatch), e.callback, e.policy, e.action});
  }
  return t;
}

}  // namespace

CsvTable CompressionScheduler::event_table() const { return events_table(events_); }

std::string events_to_csv(const std::vector<SchedulerEvent>& events) { return write_csv(events_table(events)); }

}  // namespace nncomp
