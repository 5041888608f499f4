// SPDX-License-Identifier: Apache-2.0
#include "nncomp/distill.hpp"

#include <algorithm>

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"

namespace nncomp {

void DistillSpec::validate() const {
  if (!(temperature > 0.0)) throw ContractError("distillation temperature must be positive");
  if (student_weight < 0.0 || distill_weight < 0.0) throw ContractError("distillation weights must be >= 0");
  if (!(student_weight + distill_weight > 0.0)) throw ContractError("distillation weights sum to zero");
}

Tensor kd_soft_term(const Tensor& student_logits, const Tensor& teacher_logits, const DistillSpec& spec) {
  spec.validate();
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("kd_loss: student logits " + shape_str(student_logits.shape()) +
                         " do not match teacher logits " + shape_str(teacher_logits.shape()));
  }
  const double t = spec.temperature;
  Tensor p;
  {
    NoGradGuard guard;
    p = softmax(scale(teacher_logits.detach(), 1.0 / t)).detach();
  }
  Tensor log_q = log_softmax(scale(student_logits, 1.0 / t));
  return scale(kl_divergence(p, log_q), spec.distill_weight * t * t);
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const std::int32_t> labels, const DistillSpec& spec) {
  spec.validate();
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("kd_loss: student logits " + shape_str(student_logits.shape()) +
                         " do not match teacher logits " + shape_str(teacher_logits.shape()));
  }
  Tensor loss;
  if (spec.student_weight != 0.0) loss = scale(cross_entropy(student_logits, labels), spec.student_weight);
  if (spec.distill_weight != 0.0) {
    Tensor soft = kd_soft_term(student_logits, teacher_logits, spec);
    loss = loss.defined() ? add(loss, soft) : soft;
  }
  return loss;
}

LthState lth_snapshot(const Model& model) {
  LthState s;
  for (const auto& [name, t] : model.parameters()) s.initial.emplace_back(name, t.clone());
  return s;
}

void lth_rewind(Model& model, const LthState& state, const MaskSet& masks) {
  for (const auto& [name, t] : state.initial) {
    if (!model.has_param(name)) throw DimensionError("LTH snapshot names unknown parameter '" + name + "'");
    if (model.param(name).shape() != t.shape()) {
      throw DimensionError("LTH snapshot of '" + name + "' has shape " + shape_str(t.shape()) +
                           ", model has " + shape_str(model.param(name).shape()));
    }
  }
  for (const auto& [name, mask] : masks) {
    if (!model.has_param(name)) throw ContractError("mask refers to unknown parameter '" + name + "'");
  }
  for (const auto& [name, t] : state.initial) {
    auto dst = model.param(name).mutable_data();
    auto src = t.data();
    std::copy(src.begin(), src.end(), dst.begin());
    auto it = masks.find(name);
    if (it == masks.end()) continue;
    auto m = it->second.values.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (m[i] == 0.0) dst[i] = 0.0;
    }
  }
}

}  // namespace nncomp
