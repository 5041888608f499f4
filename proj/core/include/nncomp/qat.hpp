// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "nncomp/model.hpp"
#include "nncomp/quantization.hpp"

namespace nncomp {

enum class QatMethod { Ema, Dorefa, Pact };

const char* qat_method_name(QatMethod m) noexcept;
QatMethod parse_qat_method(const std::string& s);

struct QatConfig {
  QatMethod method = QatMethod::Ema;
  int bits = 8;
  double ema_decay = 0.999;
  double pact_alpha_init = 6.0;
};

/// Fake quantization wired into a model's forward pass.
///   ema:    weights fake-quantized from their own symmetric range, ReLU
///           outputs fake-quantized with EMA-tracked asymmetric ranges.
///   dorefa: DoReFa weights, ReLU outputs as in ema.
///   pact:   symmetric fake-quant weights, ReLU sites replaced by PACT with a
///           learnable clip "<relu id>.pact_alpha".
/// In eval mode the EMA ranges are frozen; a site never seen in training is
/// passed through unquantized.
class QatInterceptor : public ForwardInterceptor {
 public:
  QatInterceptor(const Model& model, QatConfig config);

  Tensor weight(const std::string& param_name, const Tensor& w, Mode mode) override;
  Tensor activation(const LayerSpec& site, const Tensor& pre, Mode mode) override;
  NamedTensors parameters() const override;

  /// Enforces alpha >= kPactAlphaFloor after an optimizer step.
  void clamp_alphas();

  const QatConfig& config() const noexcept { return config_; }
  const std::map<std::string, EmaState>& ema_states() const noexcept { return ema_; }
  nlohmann::json describe() const;

 private:
  QatConfig config_;
  std::map<std::string, EmaState> ema_;
  NamedTensors alphas_;
};

}  // namespace nncomp
