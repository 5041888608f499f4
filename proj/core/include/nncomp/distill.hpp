// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "nncomp/mask.hpp"
#include "nncomp/model.hpp"

namespace nncomp {

struct DistillSpec {
  double temperature = 1.0;
  double student_weight = 1.0;
  double distill_weight = 0.0;

  void validate() const;
};

/// w_s * CE(student, labels) + w_d * T^2 * KL(softmax(teacher/T) || softmax(student/T)).
/// The teacher logits are detached. Terms with a zero weight are not built.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               std::span<const std::int32_t> labels, const DistillSpec& spec);

/// w_d * T^2 * KL term alone.
Tensor kd_soft_term(const Tensor& student_logits, const Tensor& teacher_logits, const DistillSpec& spec);

/// Copy of every parameter taken before training.
struct LthState {
  NamedTensors initial;
};

LthState lth_snapshot(const Model& model);

/// Unmasked weights return bitwise to their snapshot value, masked weights
/// become 0. Parameters without a mask are restored in full.
void lth_rewind(Model& model, const LthState& state, const MaskSet& masks);

}  // namespace nncomp
