// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nncomp/data.hpp"
#include "nncomp/model.hpp"
#include "nncomp/tensor.hpp"

namespace nncomp {

enum class QuantMode { Symmetric, Asymmetric };

const char* quant_mode_name(QuantMode m) noexcept;
QuantMode parse_quant_mode(const std::string& s);

/// Per-tensor when `channel_axis` is empty, otherwise one (scale, zero point)
/// pair per slice along the axis.
struct QuantGranularity {
  std::optional<std::size_t> channel_axis;

  static QuantGranularity per_tensor() { return {}; }
  static QuantGranularity per_channel(std::size_t axis) { return {axis}; }
  bool operator==(const QuantGranularity&) const = default;
};

/// Signed integer grid [-2^(n-1), 2^(n-1) - 1] for every mode.
struct QuantParams {
  int bits = 8;
  QuantMode mode = QuantMode::Asymmetric;
  QuantGranularity granularity;
  std::vector<double> scale;
  std::vector<std::int32_t> zero_point;

  int qmin() const noexcept;
  int qmax() const noexcept;
  std::size_t channels() const noexcept { return scale.size(); }
  /// Real interval that maps inside the grid for channel `c`.
  std::pair<double, double> representable(std::size_t c) const;

  bool operator==(const QuantParams&) const = default;
};

void to_json(nlohmann::json& j, const QuantParams& qp);
void from_json(const nlohmann::json& j, QuantParams& qp);

int quant_min(int bits);
int quant_max(int bits);

/// Round half away from zero; the single rounding rule for quantization.
double round_half_away(double x) noexcept;

/// Asymmetric: scale = (max - min) / (qmax - qmin), z = round(qmin - min/scale),
/// with the range first widened to contain zero. Symmetric: scale =
/// max(|min|, |max|) / qmax, z = 0. A degenerate range (min == max == v)
/// yields scale = max(|v|, 1e-8) / qmax and z = 0.
QuantParams compute_qparams(double range_min, double range_max, int bits, QuantMode mode);
QuantParams compute_qparams(std::span<const double> mins, std::span<const double> maxs, int bits,
                            QuantMode mode, QuantGranularity granularity);
/// Ranges taken from the tensor's own extrema (per slice when per-channel).
QuantParams qparams_from_tensor(const Tensor& x, int bits, QuantMode mode,
                                QuantGranularity granularity);

struct QTensor {
  Shape shape;
  std::vector<std::int32_t> values;
};

QTensor quantize(const Tensor& x, const QuantParams& qp);
Tensor dequantize(const QTensor& q, const QuantParams& qp, DType dtype = DType::F32);
/// dequantize(quantize(x)) with a straight-through gradient: 1 where x lies in
/// the representable range, 0 outside.
Tensor fake_quant(const Tensor& x, const QuantParams& qp);

// ---- range statistics ------------------------------------------------------

inline constexpr std::size_t kHistogramBins = 2048;

struct RangeStats {
  double min = 0.0;
  double max = 0.0;
  double avg_min = 0.0;
  double avg_max = 0.0;
  std::size_t batch_count = 0;
  std::size_t count = 0;
  /// kHistogramBins uniform bins over [min, max].
  std::vector<std::uint64_t> histogram;

  /// Mean |x| estimated from bin centers.
  double mean_abs() const;
  bool operator==(const RangeStats&) const = default;
};

void to_json(nlohmann::json& j, const RangeStats& s);
void from_json(const nlohmann::json& j, RangeStats& s);

/// Accumulates batches; the histogram is built once the extrema are known.
class StatsCollector {
 public:
  void observe(std::span<const double> batch);
  bool empty() const noexcept { return batch_count_ == 0; }
  RangeStats finish() const;

 private:
  std::vector<double> values_;
  double min_ = 0.0, max_ = 0.0, sum_min_ = 0.0, sum_max_ = 0.0;
  std::size_t batch_count_ = 0;
};

RangeStats collect_stats(const std::vector<std::vector<double>>& batches);

// ---- ACIQ --------------------------------------------------------------------

/// Expected squared error of clipping a Laplace(0, b) variable to [-a, a] and
/// quantizing uniformly with 2^bits levels: 2b^2 e^(-a/b) + a^2 / (3 * 4^bits).
double laplace_clip_mse(double alpha, double b, int bits);

/// Golden-section minimizer of laplace_clip_mse over (0, upper].
double aciq_alpha(double b, int bits, double upper);

/// Symmetric clip (-a*, a*) for a zero-mean Laplace fit b = mean|x| of the
/// histogram, searched over (0, max(|min|, |max|)].
std::pair<double, double> aciq_clip(const RangeStats& stats, int bits);

// ---- simulated integer inference ---------------------------------------------

/// Integer-valued matmul of quantized x[N x in] and W[out x in], rescaled by
/// scale_x * scale_w (per output channel when qp_w is per-channel on axis 0),
/// plus a float bias.
Tensor quantized_linear_sim(const Tensor& x, const Tensor& w, const Tensor& b,
                            const QuantParams& qp_x, const QuantParams& qp_w);

// ---- quantization-aware training primitives ------------------------------------

struct EmaState {
  double running_min = 0.0;
  double running_max = 0.0;
  double decay = 0.999;
  bool initialized = false;
};

/// First call copies the batch range; later calls blend with `decay`.
EmaState ema_update(EmaState state, double batch_min, double batch_max);

/// Q_k(x) = round((2^k - 1) x) / (2^k - 1).
double dorefa_quantize_unit(double x, int k);

/// 2 Q_k(tanh(w) / (2 max|tanh(W)|) + 1/2) - 1, straight-through over Q_k.
Tensor dorefa_weight_quant(const Tensor& w, int k);

/// clamp(x, 0, alpha) written as 0.5(|x| - |x - alpha| + alpha); alpha is a
/// single-element tensor. d/dx is 1 on (0, alpha); d/dalpha is 1 where x >= alpha.
Tensor pact_forward(const Tensor& x, const Tensor& alpha);

/// PACT followed by a (2^bits - 1)-level uniform quantizer on [0, alpha],
/// straight-through for x and the same alpha gradient as pact_forward.
Tensor pact_quant(const Tensor& x, const Tensor& alpha, int bits);

inline constexpr double kPactAlphaFloor = 1e-3;

// ---- post-training quantization ---------------------------------------------

enum class ClipMode { None, Avg, Aciq };

const char* clip_mode_name(ClipMode c) noexcept;
ClipMode parse_clip_mode(const std::string& s);

struct PtqConfig {
  int bits = 8;
  QuantMode mode = QuantMode::Asymmetric;
  bool per_channel = false;
  ClipMode clip = ClipMode::None;
};

/// Input statistics of every linear/conv layer, keyed "<layer>.input".
struct CalibrationStats {
  std::map<std::string, RangeStats> sites;
};

nlohmann::json calibration_to_json(const CalibrationStats& stats);
CalibrationStats calibration_from_json(const nlohmann::json& j);

/// Runs eval-mode forwards over `data` and records per-site statistics.
CalibrationStats calibrate(Model& model, const Dataset& data, std::size_t batch_size);

/// Activation range picked for a site under a clipping mode.
std::pair<double, double> activation_range(const RangeStats& stats, ClipMode clip, int bits);

/// Model evaluated with simulated integer arithmetic: linear layers go through
/// quantized_linear_sim, conv layers see quantized-then-dequantized inputs and
/// weights.
class PtqModel {
 public:
  PtqModel(const Model& model, const CalibrationStats& stats, const PtqConfig& config);

  Tensor forward(const Tensor& x) const;
  const PtqConfig& config() const noexcept { return config_; }
  const std::map<std::string, QuantParams>& activation_params() const noexcept { return act_; }
  const std::map<std::string, QuantParams>& weight_params() const noexcept { return wt_; }
  nlohmann::json describe() const;

 private:
  Model model_;
  PtqConfig config_;
  std::map<std::string, QuantParams> act_;
  std::map<std::string, QuantParams> wt_;
};

}  // namespace nncomp
