// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "nncomp/mask.hpp"
#include "nncomp/model.hpp"

namespace nncomp {

/// Removal of output channels of one layer and everything that depends on them.
struct ThinningStep {
  std::string producer;
  /// Removed output channels (conv filters or linear rows), ascending.
  std::vector<std::size_t> channels;
  /// Batch-norm layers between producer and consumer whose rows go too.
  std::vector<std::string> batchnorms;
  /// Next parametric layer; loses the matching input channels (a block of
  /// H*W columns per channel when a flatten sits in between).
  std::string consumer;

  bool operator==(const ThinningStep&) const = default;
};

struct ThinningPlan {
  std::vector<ThinningStep> steps;

  bool empty() const noexcept { return steps.empty(); }
  bool operator==(const ThinningPlan&) const = default;
};

/// Lists every filter whose masked weights and bias are all zero and whose
/// channel stays zero after any batch norm and ReLU before the consumer. The
/// final layer is never thinned and at least one channel is always kept.
/// Models with exit branches are rejected as an unsupported topology.
ThinningPlan plan_thinning(const Model& model, const MaskSet& masks);

/// New model with the planned structures removed. `masks`, when given, is
/// thinned alongside.
Model apply_thinning(const Model& model, const ThinningPlan& plan, MaskSet* masks = nullptr);

/// Replaces linear layer `layer_id` (W: out x in) by "<id>_a" (in -> k, no
/// bias, weight S^1/2 V^T) followed by "<id>_b" (k -> out, the original
/// bias, weight U S^1/2), the best rank-k factorization.
Model truncated_svd_replace(const Model& model, const std::string& layer_id, std::size_t rank);

/// Folds every eval-mode batch norm into the conv before it:
/// W' = W * g/sqrt(v + eps), b' = (b - m) * g/sqrt(v + eps) + beta.
Model fold_batchnorm(const Model& model);

Model attach_exit(const Model& model, ExitBranch branch);

struct ExitResult {
  /// Logits of the head chosen for each row.
  Tensor logits;
  /// Exit branch index per row; exits().size() means the final head.
  std::vector<std::size_t> exit_index;
};

/// Softmax entropy per row in nats.
std::vector<double> row_entropy(const Tensor& logits);

/// Per row, the first exit whose entropy is below `threshold` (every row
/// takes the first exit when threshold >= log C), else the final head.
ExitResult infer_with_exits(Model& model, const Tensor& x, double threshold);

}  // namespace nncomp
