// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nncomp/tensor.hpp"

namespace nncomp {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Momentum SGD: v <- mu*v + g; w <- w - lr*v. Gradients are left in place;
/// clearing them is the training loop's job.
class Sgd {
 public:
  Sgd(double lr, double momentum = 0.0);

  void step(const NamedTensors& params);

  double lr() const noexcept { return lr_; }
  void set_lr(double lr);
  double momentum() const noexcept { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

void zero_grads(const NamedTensors& params);

}  // namespace nncomp
