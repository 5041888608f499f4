// SPDX-License-Identifier: Apache-2.0
#include "nncomp/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"

namespace nncomp {

namespace {

using Grads = std::vector<std::vector<double>>;

// Channel of each linear element for a slice along `axis`.
struct ChannelMap {
  std::size_t inner = 1;
  std::size_t channels = 1;
  std::size_t of(std::size_t i) const noexcept { return channels == 1 ? 0 : (i / inner) % channels; }
};

ChannelMap channel_map(const Shape& shape, const QuantGranularity& g) {
  ChannelMap m;
  if (!g.channel_axis) return m;
  std::size_t axis = *g.channel_axis;
  if (axis >= shape.size()) {
    throw DimensionError("per-channel axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  m.channels = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) m.inner *= shape[d];
  return m;
}

void check_bits(int bits) {
  if (bits < 2 || bits > 8) throw ContractError("quantization bits must lie in [2, 8], got " + std::to_string(bits));
}

}  // namespace

const char* quant_mode_name(QuantMode m) noexcept {
  return m == QuantMode::Symmetric ? "symmetric" : "asymmetric";
}

QuantMode parse_quant_mode(const std::string& s) {
  if (s == "symmetric") return QuantMode::Symmetric;
  if (s == "asymmetric") return QuantMode::Asymmetric;
  throw ContractError("unknown quantization mode '" + s + "'");
}

const char* clip_mode_name(ClipMode c) noexcept {
  switch (c) {
    case ClipMode::None: return "none";
    case ClipMode::Avg: return "avg";
    case ClipMode::Aciq: return "aciq";
  }
  return "?";
}

ClipMode parse_clip_mode(const std::string& s) {
  if (s == "none") return ClipMode::None;
  if (s == "avg") return ClipMode::Avg;
  if (s == "aciq") return ClipMode::Aciq;
  throw ContractError("unknown clip mode '" + s + "'");
}

int quant_min(int bits) { return -(1 << (bits - 1)); }
int quant_max(int bits) { return (1 << (bits - 1)) - 1; }

int QuantParams::qmin() const noexcept { return quant_min(bits); }
int QuantParams::qmax() const noexcept { return quant_max(bits); }

std::pair<double, double> QuantParams::representable(std::size_t c) const {
  return {(qmin() - zero_point[c]) * scale[c], (qmax() - zero_point[c]) * scale[c]};
}

void to_json(nlohmann::json& j, const QuantParams& qp) {
  j = nlohmann::json{{"bits", qp.bits},
                     {"mode", quant_mode_name(qp.mode)},
                     {"scale", qp.scale},
                     {"zero_point", qp.zero_point}};
  if (qp.granularity.channel_axis) {
    j["granularity"] = "per_channel";
    j["axis"] = *qp.granularity.channel_axis;
  } else {
    j["granularity"] = "per_tensor";
  }
}

void from_json(const nlohmann::json& j, QuantParams& qp) {
  qp.bits = j.at("bits").get<int>();
  qp.mode = parse_quant_mode(j.at("mode").get<std::string>());
  qp.scale = j.at("scale").get<std::vector<double>>();
  qp.zero_point = j.at("zero_point").get<std::vector<std::int32_t>>();
  qp.granularity = j.at("granularity") == "per_channel"
                       ? QuantGranularity::per_channel(j.at("axis").get<std::size_t>())
                       : QuantGranularity::per_tensor();
}

double round_half_away(double x) noexcept { return std::round(x); }

QuantParams compute_qparams(double range_min, double range_max, int bits, QuantMode mode) {
  double mins[1] = {range_min}, maxs[1] = {range_max};
  return compute_qparams(mins, maxs, bits, mode, QuantGranularity::per_tensor());
}

QuantParams compute_qparams(std::span<const double> mins, std::span<const double> maxs, int bits,
                            QuantMode mode, QuantGranularity granularity) {
  check_bits(bits);
  if (mins.size() != maxs.size() || mins.empty()) throw ContractError("qparams: range lists differ in length");
  if (!granularity.channel_axis && mins.size() != 1) {
    throw ContractError("qparams: per-tensor granularity takes a single range");
  }
  QuantParams qp;
  qp.bits = bits;
  qp.mode = mode;
  qp.granularity = granularity;
  const int qmin = quant_min(bits), qmax = quant_max(bits);
  for (std::size_t c = 0; c < mins.size(); ++c) {
    double lo = mins[c], hi = maxs[c];
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("qparams: non-finite range");
    if (hi < lo) throw ContractError("qparams: range max is below range min");
    double scale = 0.0;
    std::int32_t zp = 0;
    if (hi == lo) {
      scale = std::max(std::fabs(lo), 1e-8) / qmax;
    } else if (mode == QuantMode::Symmetric) {
      scale = std::max(std::fabs(lo), std::fabs(hi)) / qmax;
    } else {
      lo = std::min(lo, 0.0);
      hi = std::max(hi, 0.0);
      scale = (hi - lo) / static_cast<double>(qmax - qmin);
      double z = round_half_away(qmin - lo / scale);
      zp = static_cast<std::int32_t>(std::clamp(z, static_cast<double>(qmin), static_cast<double>(qmax)));
    }
    qp.scale.push_back(scale);
    qp.zero_point.push_back(zp);
  }
  return qp;
}

QuantParams qparams_from_tensor(const Tensor& x, int bits, QuantMode mode, QuantGranularity granularity) {
  ChannelMap cm = channel_map(x.shape(), granularity);
  std::vector<double> mins(cm.channels, std::numeric_limits<double>::infinity());
  std::vector<double> maxs(cm.channels, -std::numeric_limits<double>::infinity());
  auto v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t c = cm.of(i);
    mins[c] = std::min(mins[c], v[i]);
    maxs[c] = std::max(maxs[c], v[i]);
  }
  return compute_qparams(mins, maxs, bits, mode, granularity);
}

QTensor quantize(const Tensor& x, const QuantParams& qp) {
  ChannelMap cm = channel_map(x.shape(), qp.granularity);
  if (cm.channels != qp.channels()) {
    throw DimensionError("quantize: " + std::to_string(qp.channels()) + " channel params for " +
                         std::to_string(cm.channels) + " channels");
  }
  QTensor q;
  q.shape = x.shape();
  auto v = x.data();
  q.values.resize(v.size());
  const double qmin = qp.qmin(), qmax = qp.qmax();
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t c = cm.of(i);
    double r = round_half_away(v[i] / qp.scale[c]) + qp.zero_point[c];
    q.values[i] = static_cast<std::int32_t>(std::clamp(r, qmin, qmax));
  }
  return q;
}

Tensor dequantize(const QTensor& q, const QuantParams& qp, DType dtype) {
  ChannelMap cm = channel_map(q.shape, qp.granularity);
  std::vector<double> out(q.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t c = cm.of(i);
    out[i] = (q.values[i] - qp.zero_point[c]) * qp.scale[c];
  }
  return Tensor(q.shape, std::move(out), dtype);
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  Tensor deq = dequantize(quantize(x, qp), qp, x.dtype());
  ChannelMap cm = channel_map(x.shape(), qp.granularity);
  auto v = x.data();
  std::vector<char> inside(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto [lo, hi] = qp.representable(cm.of(i));
    inside[i] = v[i] >= lo && v[i] <= hi;
  }
  return record_op("fake_quant", x.shape(), deq.to_vector(), x.dtype(), {x},
                   [inside = std::move(inside)](std::span<const double> g) {
                     std::vector<double> dx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) dx[i] = inside[i] ? g[i] : 0.0;
                     return Grads{std::move(dx)};
                   });
}

// ---- statistics ---------------------------------------------------------------

double RangeStats::mean_abs() const {
  if (count == 0) return 0.0;
  if (max == min) return std::fabs(min);
  const double width = (max - min) / static_cast<double>(histogram.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < histogram.size(); ++i) {
    acc += static_cast<double>(histogram[i]) * std::fabs(min + (static_cast<double>(i) + 0.5) * width);
  }
  return acc / static_cast<double>(count);
}

void to_json(nlohmann::json& j, const RangeStats& s) {
  j = nlohmann::json{{"min", s.min},         {"max", s.max},
                     {"avg_min", s.avg_min}, {"avg_max", s.avg_max},
                     {"batch_count", s.batch_count}, {"count", s.count},
                     {"histogram", s.histogram}};
}

void from_json(const nlohmann::json& j, RangeStats& s) {
  s.min = j.at("min").get<double>();
  s.max = j.at("max").get<double>();
  s.avg_min = j.at("avg_min").get<double>();
  s.avg_max = j.at("avg_max").get<double>();
  s.batch_count = j.at("batch_count").get<std::size_t>();
  s.count = j.at("count").get<std::size_t>();
  s.histogram = j.at("histogram").get<std::vector<std::uint64_t>>();
}

void StatsCollector::observe(std::span<const double> batch) {
  if (batch.empty()) throw ContractError("stats: empty batch");
  auto [lo, hi] = std::minmax_element(batch.begin(), batch.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi)) throw NumericError("stats: non-finite activation");
  if (batch_count_ == 0) {
    min_ = *lo;
    max_ = *hi;
  } else {
    min_ = std::min(min_, *lo);
    max_ = std::max(max_, *hi);
  }
  sum_min_ += *lo;
  sum_max_ += *hi;
  ++batch_count_;
  values_.insert(values_.end(), batch.begin(), batch.end());
}

RangeStats StatsCollector::finish() const {
  if (batch_count_ == 0) throw ContractError("stats: no batches observed");
  RangeStats s;
  s.min = min_;
  s.max = max_;
  s.avg_min = sum_min_ / static_cast<double>(batch_count_);
  s.avg_max = sum_max_ / static_cast<double>(batch_count_);
  s.batch_count = batch_count_;
  s.count = values_.size();
  s.histogram.assign(kHistogramBins, 0);
  const double width = (max_ - min_) / static_cast<double>(kHistogramBins);
  for (double v : values_) {
    std::size_t bin = 0;
    if (width > 0.0) {
      bin = static_cast<std::size_t>(std::floor((v - min_) / width));
      bin = std::min(bin, kHistogramBins - 1);
    }
    ++s.histogram[bin];
  }
  return s;
}

RangeStats collect_stats(const std::vector<std::vector<double>>& batches) {
  StatsCollector c;
  for (const auto& b : batches) c.observe(b);
  return c.finish();
}

// ---- ACIQ -------------------------------------------------------------------

double laplace_clip_mse(double alpha, double b, int bits) {
  return 2.0 * b * b * std::exp(-alpha / b) + alpha * alpha / (3.0 * std::pow(4.0, bits));
}

double aciq_alpha(double b, int bits, double upper) {
  if (!(b > 0.0) || !(upper > 0.0)) throw ContractError("aciq: scale and search bound must be positive");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = 0.0, hi = upper;
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  double f1 = laplace_clip_mse(x1, b, bits), f2 = laplace_clip_mse(x2, b, bits);
  while (hi - lo > 1e-12 * upper) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = laplace_clip_mse(x1, b, bits);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = laplace_clip_mse(x2, b, bits);
    }
  }
  return 0.5 * (lo + hi);
}

std::pair<double, double> aciq_clip(const RangeStats& stats, int bits) {
  if (stats.count == 0 || stats.histogram.empty()) throw ContractError("aciq: empty histogram");
  const double upper = std::max(std::fabs(stats.min), std::fabs(stats.max));
  const double b = stats.mean_abs();
  if (upper == 0.0 || b == 0.0) return {-upper, upper};
  double alpha = aciq_alpha(b, bits, upper);
  return {-alpha, alpha};
}

// ---- simulated integer inference ---------------------------------------------

Tensor quantized_linear_sim(const Tensor& x, const Tensor& w, const Tensor& b, const QuantParams& qp_x,
                            const QuantParams& qp_w) {
  if (x.dim() != 2 || w.dim() != 2 || x.size(1) != w.size(1)) {
    throw DimensionError("quantized_linear_sim: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (qp_x.channels() != 1) throw ContractError("quantized_linear_sim: activations must be per-tensor");
  if (qp_w.granularity.channel_axis && *qp_w.granularity.channel_axis != 0) {
    throw ContractError("quantized_linear_sim: weights must be per-tensor or per output channel");
  }
  const std::size_t n = x.size(0), in = x.size(1), out = w.size(0);
  QTensor qx = quantize(x, qp_x);
  QTensor qw = quantize(w, qp_w);
  auto bv = b.defined() ? b.data() : std::span<const double>{};
  std::vector<double> y(n * out);
  const std::int64_t zx = qp_x.zero_point[0];
  for (std::size_t o = 0; o < out; ++o) {
    const std::size_t c = qp_w.channels() == 1 ? 0 : o;
    const std::int64_t zw = qp_w.zero_point[c];
    const double combined = qp_x.scale[0] * qp_w.scale[c];
    for (std::size_t r = 0; r < n; ++r) {
      std::int64_t acc = 0;
      for (std::size_t i = 0; i < in; ++i) {
        acc += (qx.values[r * in + i] - zx) * (qw.values[o * in + i] - zw);
      }
      y[r * out + o] = static_cast<double>(acc) * combined + (bv.empty() ? 0.0 : bv[o]);
    }
  }
  return Tensor({n, out}, std::move(y), x.dtype());
}

// ---- QAT primitives -----------------------------------------------------------

EmaState ema_update(EmaState state, double batch_min, double batch_max) {
  if (!state.initialized) {
    state.running_min = batch_min;
    state.running_max = batch_max;
    state.initialized = true;
    return state;
  }
  state.running_min = state.decay * state.running_min + (1.0 - state.decay) * batch_min;
  state.running_max = state.decay * state.running_max + (1.0 - state.decay) * batch_max;
  return state;
}

double dorefa_quantize_unit(double x, int k) {
  const double levels = std::ldexp(1.0, k) - 1.0;
  return round_half_away(levels * x) / levels;
}

Tensor dorefa_weight_quant(const Tensor& w, int k) {
  if (k < 2) throw ContractError("DoReFa needs at least 2 bits, got " + std::to_string(k));
  auto v = w.data();
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(std::tanh(x)));
  if (m == 0.0) throw ContractError("DoReFa: weight tensor is all zero");
  std::vector<double> out(v.size()), deriv(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double t = std::tanh(v[i]);
    out[i] = 2.0 * dorefa_quantize_unit(t / (2.0 * m) + 0.5, k) - 1.0;
    deriv[i] = (1.0 - t * t) / m;
  }
  return record_op("dorefa_weight", w.shape(), std::move(out), w.dtype(), {w},
                   [deriv = std::move(deriv)](std::span<const double> g) {
                     std::vector<double> dx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * deriv[i];
                     return Grads{std::move(dx)};
                   });
}

namespace {

Tensor pact_impl(const Tensor& x, const Tensor& alpha, int bits) {
  if (alpha.numel() != 1) throw DimensionError("PACT alpha must be a single element");
  const double a = alpha.item();
  if (!(a > 0.0)) throw ContractError("PACT alpha must be positive");
  auto v = x.data();
  std::vector<double> out(v.size());
  const double levels = bits > 0 ? std::ldexp(1.0, bits) - 1.0 : 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double y = 0.5 * (std::fabs(v[i]) - std::fabs(v[i] - a) + a);
    if (bits > 0) y = round_half_away(y * levels / a) * a / levels;
    out[i] = y;
  }
  std::vector<double> xv(v.begin(), v.end());
  return record_op(bits > 0 ? "pact_quant" : "pact", x.shape(), std::move(out), promote(x.dtype(), alpha.dtype()),
                   {x, alpha}, [xv = std::move(xv), a](std::span<const double> g) {
                     std::vector<double> dx(g.size());
                     double da = 0.0;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       dx[i] = (xv[i] > 0.0 && xv[i] < a) ? g[i] : 0.0;
                       if (xv[i] >= a) da += g[i];
                     }
                     return Grads{std::move(dx), std::vector<double>{da}};
                   });
}

}  // namespace

Tensor pact_forward(const Tensor& x, const Tensor& alpha) { return pact_impl(x, alpha, 0); }

Tensor pact_quant(const Tensor& x, const Tensor& alpha, int bits) {
  check_bits(bits);
  return pact_impl(x, alpha, bits);
}

// ---- PTQ ------------------------------------------------------------------------

nlohmann::json calibration_to_json(const CalibrationStats& stats) {
  nlohmann::json sites = nlohmann::json::object();
  for (const auto& [name, s] : stats.sites) sites[name] = s;
  return nlohmann::json{{"sites", sites}};
}

CalibrationStats calibration_from_json(const nlohmann::json& j) {
  CalibrationStats stats;
  for (const auto& [name, s] : j.at("sites").items()) stats.sites[name] = s.get<RangeStats>();
  return stats;
}

CalibrationStats calibrate(Model& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard guard;
  std::map<std::string, StatsCollector> collectors;
  MinibatchStream stream(data, batch_size, SamplerSpec{}, 0);
  while (auto batch = stream.next()) {
    model.forward_observed(batch->x, Mode::Eval, [&](const LayerSpec& l, const Tensor& in, const Tensor&) {
      if (l.parametric()) collectors[l.id + ".input"].observe(in.data());
    });
  }
  CalibrationStats stats;
  for (const auto& [name, c] : collectors) stats.sites[name] = c.finish();
  return stats;
}

std::pair<double, double> activation_range(const RangeStats& stats, ClipMode clip, int bits) {
  switch (clip) {
    case ClipMode::None:
      return {stats.min, stats.max};
    case ClipMode::Avg:
      return {stats.avg_min, stats.avg_max};
    case ClipMode::Aciq: {
      auto [lo, hi] = aciq_clip(stats, bits);
      return {std::max(lo, stats.min), std::min(hi, stats.max)};
    }
  }
  return {stats.min, stats.max};
}

PtqModel::PtqModel(const Model& model, const CalibrationStats& stats, const PtqConfig& config)
    : model_(model.clone()), config_(config) {
  check_bits(config.bits);
  model_.set_interceptor(nullptr);
  for (const auto& l : model_.layers()) {
    if (!l.parametric()) continue;
    auto it = stats.sites.find(l.id + ".input");
    if (it == stats.sites.end()) throw ContractError("PTQ: no calibration statistics for '" + l.id + ".input'");
    auto [lo, hi] = activation_range(it->second, config.clip, config.bits);
    act_[it->first] = compute_qparams(lo, hi, config.bits, config.mode);
    const Tensor& w = model_.param(l.id + ".weight");
    wt_[l.id + ".weight"] = qparams_from_tensor(
        w, config.bits, config.mode,
        config.per_channel ? QuantGranularity::per_channel(0) : QuantGranularity::per_tensor());
  }
}

Tensor PtqModel::forward(const Tensor& x) const {
  NoGradGuard guard;
  Model& m = const_cast<Model&>(model_);
  Tensor h = x;
  for (const auto& l : m.layers()) {
    if (l.kind == LayerKind::Linear) {
      h = quantized_linear_sim(h, m.param(l.id + ".weight"), l.bias ? m.param(l.id + ".bias") : Tensor(),
                               act_.at(l.id + ".input"), wt_.at(l.id + ".weight"));
    } else if (l.kind == LayerKind::Conv2d) {
      const QuantParams& qx = act_.at(l.id + ".input");
      const QuantParams& qw = wt_.at(l.id + ".weight");
      Tensor xq = fake_quant(h, qx);
      Tensor wq = fake_quant(m.param(l.id + ".weight"), qw);
      h = conv2d(xq, wq, l.bias ? m.param(l.id + ".bias") : Tensor(), l.stride, l.padding);
    } else {
      h = m.apply_layer(l, h, Mode::Eval);
    }
  }
  return h;
}

nlohmann::json PtqModel::describe() const {
  nlohmann::json j;
  j["bits"] = config_.bits;
  j["mode"] = quant_mode_name(config_.mode);
  j["granularity"] = config_.per_channel ? "channel" : "tensor";
  j["clip"] = clip_mode_name(config_.clip);
  nlohmann::json acts = nlohmann::json::object(), wts = nlohmann::json::object();
  for (const auto& [k, v] : act_) acts[k] = v;
  for (const auto& [k, v] : wt_) wts[k] = v;
  j["activations"] = acts;
  j["weights"] = wts;
  return j;
}

}  // namespace nncomp
