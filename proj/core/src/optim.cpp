// SPDX-License-Identifier: Apache-2.0
#include "nncomp/optim.hpp"

#include "nncomp/error.hpp"

namespace nncomp {

Sgd::Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw ContractError("sgd: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("sgd: momentum must lie in [0, 1)");
}

void Sgd::set_lr(double lr) {
  if (!(lr > 0.0)) throw ContractError("sgd: learning rate must be positive");
  lr_ = lr;
}

void Sgd::step(const NamedTensors& params) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw ContractError("sgd: parameter '" + name + "' holds no gradient");
  }
  for (const auto& [name, p] : params) {
    Tensor t = p;
    auto g = t.grad_data();
    auto& v = velocity_[name];
    if (v.size() != g.size()) v.assign(g.size(), 0.0);
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr_ * v[i];
    }
    t.round_to_dtype();
  }
}

void zero_grads(const NamedTensors& params) {
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

}  // namespace nncomp
