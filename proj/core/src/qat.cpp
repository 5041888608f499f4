// SPDX-License-Identifier: Apache-2.0
#include "nncomp/qat.hpp"

#include <algorithm>

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"

namespace nncomp {

const char* qat_method_name(QatMethod m) noexcept {
  switch (m) {
    case QatMethod::Ema: return "ema";
    case QatMethod::Dorefa: return "dorefa";
    case QatMethod::Pact: return "pact";
  }
  return "?";
}

QatMethod parse_qat_method(const std::string& s) {
  if (s == "ema") return QatMethod::Ema;
  if (s == "dorefa") return QatMethod::Dorefa;
  if (s == "pact") return QatMethod::Pact;
  throw ContractError("unknown QAT method '" + s + "'");
}

QatInterceptor::QatInterceptor(const Model& model, QatConfig config) : config_(config) {
  if (config.bits < 2 || config.bits > 8) throw ContractError("QAT bits must lie in [2, 8]");
  if (!(config.ema_decay >= 0.0 && config.ema_decay < 1.0)) throw ContractError("EMA decay must lie in [0, 1)");
  if (config.method == QatMethod::Pact) {
    if (!(config.pact_alpha_init > 0.0)) throw ContractError("PACT initial alpha must be positive");
    for (const auto& l : model.layers()) {
      if (l.kind != LayerKind::Relu) continue;
      Tensor a = Tensor::full({1}, config.pact_alpha_init, model.dtype());
      a.set_requires_grad(true);
      alphas_.emplace_back(l.id + ".pact_alpha", a);
    }
  }
}

Tensor QatInterceptor::weight(const std::string&, const Tensor& w, Mode) {
  if (config_.method == QatMethod::Dorefa) return dorefa_weight_quant(w, config_.bits);
  QuantParams qp = qparams_from_tensor(w, config_.bits, QuantMode::Symmetric, QuantGranularity::per_tensor());
  return fake_quant(w, qp);
}

Tensor QatInterceptor::activation(const LayerSpec& site, const Tensor& pre, Mode mode) {
  if (config_.method == QatMethod::Pact) {
    for (const auto& [name, alpha] : alphas_) {
      if (name == site.id + ".pact_alpha") return pact_quant(pre, alpha, config_.bits);
    }
    throw ContractError("no PACT clip for activation site '" + site.id + "'");
  }
  Tensor y = relu(pre);
  EmaState& st = ema_[site.id];
  if (mode == Mode::Train) {
    auto v = y.data();
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    st.decay = config_.ema_decay;
    st = ema_update(st, *lo, *hi);
  } else if (!st.initialized) {
    return y;
  }
  return fake_quant(y, compute_qparams(st.running_min, st.running_max, config_.bits, QuantMode::Asymmetric));
}

NamedTensors QatInterceptor::parameters() const { return alphas_; }

void QatInterceptor::clamp_alphas() {
  for (auto& [name, alpha] : alphas_) {
    auto a = alpha.mutable_data();
    a[0] = std::max(a[0], kPactAlphaFloor);
  }
}

nlohmann::json QatInterceptor::describe() const {
  nlohmann::json j{{"method", qat_method_name(config_.method)}, {"bits", config_.bits}};
  nlohmann::json sites = nlohmann::json::object();
  for (const auto& [site, st] : ema_) {
    sites[site] = {{"running_min", st.running_min}, {"running_max", st.running_max}};
  }
  j["ema"] = sites;
  nlohmann::json alphas = nlohmann::json::object();
  for (const auto& [name, a] : alphas_) alphas[name] = a.item();
  j["pact_alpha"] = alphas;
  return j;
}

}  // namespace nncomp
