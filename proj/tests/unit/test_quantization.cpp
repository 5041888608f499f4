// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "nncomp/error.hpp"
#include "nncomp/qat.hpp"
#include "nncomp/quantization.hpp"
#include "testing.hpp"

using namespace nncomp;
using nncomp::testing::random_tensor;

namespace {

double laplace_sample(Rng& rng, double b) {
  const double u = rng.uniform() - 0.5;
  return -b * (u < 0 ? -1.0 : 1.0) * std::log(1.0 - 2.0 * std::abs(u));
}

double mse_oracle(double alpha, double b, int bits) {
  return 2.0 * b * b * std::exp(-alpha / b) + alpha * alpha / (3.0 * std::pow(4.0, bits));
}

double grid_argmin(double b, int bits, double upper, std::size_t points) {
  double best = upper, best_v = 1e300;
  for (std::size_t i = 1; i <= points; ++i) {
    const double a = upper * static_cast<double>(i) / static_cast<double>(points);
    const double v = mse_oracle(a, b, bits);
    if (v < best_v) best_v = v, best = a;
  }
  return best;
}

}  // namespace

TEST(QParams, Examples) {
  QuantParams a = compute_qparams(0.0, 25.5, 8, QuantMode::Asymmetric);
  EXPECT_NEAR(a.scale[0], 0.1, 1e-15);
  EXPECT_EQ(a.zero_point[0], -128);
  QuantParams s = compute_qparams(-1.27, 0.5, 8, QuantMode::Symmetric);
  EXPECT_NEAR(s.scale[0], 0.01, 1e-15);
  EXPECT_EQ(s.zero_point[0], 0);
  EXPECT_THROW(compute_qparams(0.0, INFINITY, 8, QuantMode::Symmetric), NumericError);
  EXPECT_THROW(compute_qparams(1.0, 0.0, 8, QuantMode::Symmetric), ContractError);
  QuantParams d = compute_qparams(2.0, 2.0, 8, QuantMode::Asymmetric);
  EXPECT_NEAR(d.scale[0], 2.0 / 127.0, 1e-15);
  EXPECT_EQ(d.zero_point[0], 0);
}

TEST(QParams, AsymmetricRangeWidenedToZero) {
  QuantParams q = compute_qparams(1.0, 3.0, 8, QuantMode::Asymmetric);
  auto [lo, hi] = q.representable(0);
  EXPECT_LE(lo, 0.0);
  EXPECT_GE(hi, 3.0 - q.scale[0] / 2);
}

TEST(Quantize, AffineExample) {
  QuantParams a = compute_qparams(0.0, 25.5, 8, QuantMode::Asymmetric);
  QTensor q = quantize(Tensor({1}, {1.0}, DType::F64), a);
  EXPECT_EQ(q.values[0], -118);
  EXPECT_NEAR(dequantize(q, a, DType::F64).item(), 1.0, 1e-15);
}

TEST(Quantize, RoundHalfAwayFromZero) {
  EXPECT_EQ(round_half_away(2.5), 3.0);
  EXPECT_EQ(round_half_away(-2.5), -3.0);
  EXPECT_EQ(round_half_away(0.49999999999999994), 0.0);
}

TEST(Quantize, RoundTripBoundAllConfigurations) {
  Rng rng(17);
  for (int bits : {2, 4, 8}) {
    for (QuantMode mode : {QuantMode::Symmetric, QuantMode::Asymmetric}) {
      for (bool per_channel : {false, true}) {
        Tensor x = random_tensor(rng, {100, 100}, -3.0, 5.0);
        QuantGranularity g = per_channel ? QuantGranularity::per_channel(0) : QuantGranularity::per_tensor();
        QuantParams qp = qparams_from_tensor(x, bits, mode, g);
        if (mode == QuantMode::Symmetric) {
          for (auto z : qp.zero_point) EXPECT_EQ(z, 0);
        }
        Tensor back = dequantize(quantize(x, qp), qp, DType::F64);
        for (std::size_t i = 0; i < x.numel(); ++i) {
          const std::size_t c = per_channel ? i / 100 : 0;
          ASSERT_LE(std::abs(back.data()[i] - x.data()[i]), qp.scale[c] / 2)
              << bits << " bits " << quant_mode_name(mode) << (per_channel ? " channel" : " tensor");
        }
      }
    }
  }
}

TEST(FakeQuant, IdempotentAndMonotone) {
  Rng rng(3);
  for (int bits : {2, 4, 8}) {
    for (QuantMode mode : {QuantMode::Symmetric, QuantMode::Asymmetric}) {
      Tensor x = random_tensor(rng, {1000}, -2.0, 3.0);
      QuantParams qp = compute_qparams(-1.5, 2.0, bits, mode);
      Tensor once = fake_quant(x, qp);
      EXPECT_EQ(fake_quant(once, qp).to_vector(), once.to_vector());
      std::vector<double> xs = x.to_vector();
      std::sort(xs.begin(), xs.end());
      auto ys = fake_quant(Tensor({xs.size()}, xs, DType::F64), qp).to_vector();
      EXPECT_TRUE(std::is_sorted(ys.begin(), ys.end()));
    }
  }
}

TEST(FakeQuant, StraightThroughInsideRange) {
  QuantParams qp = compute_qparams(-1.0, 1.0, 8, QuantMode::Symmetric);
  Tensor x({3}, {-5.0, 0.3, 5.0}, DType::F64);
  x.set_requires_grad(true);
  backward(sum(fake_quant(x, qp)));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{0, 1, 0}));
}

TEST(Stats, HandMeans) {
  RangeStats s = collect_stats({{-1, 2}, {0, 3}});
  EXPECT_EQ(s.min, -1.0);
  EXPECT_EQ(s.max, 3.0);
  EXPECT_EQ(s.avg_min, -0.5);
  EXPECT_EQ(s.avg_max, 2.5);
  EXPECT_EQ(s.histogram.size(), kHistogramBins);
  std::uint64_t total = 0;
  for (auto h : s.histogram) total += h;
  EXPECT_EQ(total, 4u);
  EXPECT_THROW(collect_stats({}), ContractError);
}

TEST(Aciq, GoldenSectionMatchesDenseGrid) {
  for (double b : {0.1, 0.5, 1.0, 2.0}) {
    for (int bits : {2, 3, 4, 6, 8}) {
      const double upper = 30.0 * b;
      const double golden = aciq_alpha(b, bits, upper);
      const double grid = grid_argmin(b, bits, upper, 200000);
      EXPECT_LE(std::abs(golden - grid) / grid, 1e-3) << "b=" << b << " bits=" << bits;
      EXPECT_NEAR(laplace_clip_mse(golden, b, bits), mse_oracle(golden, b, bits), 1e-15);
    }
  }
}

TEST(Aciq, LaplaceFourBitOptimum) {
  EXPECT_NEAR(aciq_alpha(1.0, 4, 20.0), 5.0, 0.15);
  Rng rng(11);
  std::vector<double> v(100000);
  for (double& x : v) x = laplace_sample(rng, 1.0);
  RangeStats s = collect_stats({v});
  auto [lo, hi] = aciq_clip(s, 4);
  EXPECT_NEAR(hi, 5.0, 0.15);
  EXPECT_EQ(lo, -hi);
}

TEST(QuantizedLinear, IdentityWithinBound) {
  Rng rng(5);
  Tensor x = random_tensor(rng, {16, 4}, -1.0, 1.0);
  Tensor w({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}, DType::F64);
  QuantParams qx = qparams_from_tensor(x, 8, QuantMode::Asymmetric, QuantGranularity::per_tensor());
  QuantParams qw = qparams_from_tensor(w, 8, QuantMode::Symmetric, QuantGranularity::per_tensor());
  Tensor y = quantized_linear_sim(x, w, Tensor(), qx, qw);
  const double bound = qx.scale[0] / 2 + 4 * qx.scale[0] * qw.scale[0];
  EXPECT_LE(nncomp::testing::max_abs_diff(x, y), bound);
}

TEST(QuantizedLinear, MatchesFakeQuantComposition) {
  Rng rng(6);
  Tensor x = random_tensor(rng, {8, 5});
  Tensor w = random_tensor(rng, {3, 5});
  Tensor b = random_tensor(rng, {3});
  QuantParams qx = qparams_from_tensor(x, 8, QuantMode::Asymmetric, QuantGranularity::per_tensor());
  QuantParams qw = qparams_from_tensor(w, 8, QuantMode::Symmetric, QuantGranularity::per_channel(0));
  Tensor y = quantized_linear_sim(x, w, b, qx, qw);
  Tensor ref = linear(fake_quant(x, qx), fake_quant(w, qw), b);
  EXPECT_LE(nncomp::testing::max_abs_diff(y, ref), 1e-12);
}

TEST(Ema, Recurrence) {
  EmaState s{0.0, 0.0, 0.9, true};
  s = ema_update(s, -1.0, 1.0);
  EXPECT_NEAR(s.running_min, -0.1, 1e-15);
  EXPECT_NEAR(s.running_max, 0.1, 1e-15);
  EmaState fresh;
  fresh = ema_update(fresh, -2.0, 3.0);
  EXPECT_EQ(fresh.running_min, -2.0);
  EXPECT_EQ(fresh.running_max, 3.0);
}

TEST(Dorefa, Examples) {
  Tensor w({2}, {0.7, -0.7}, DType::F64);
  EXPECT_EQ(dorefa_weight_quant(w, 2).to_vector(), (std::vector<double>{1, -1}));
  Tensor z({3}, {0.7, 0.0, -0.7}, DType::F64);
  EXPECT_NEAR(dorefa_weight_quant(z, 2).to_vector()[1], 1.0 / 3.0, 1e-15);
  EXPECT_THROW(dorefa_weight_quant(w, 1), ContractError);
  EXPECT_THROW(dorefa_weight_quant(Tensor::zeros({2}, DType::F64), 2), ContractError);
}

TEST(Pact, ForwardAndAlphaGradient) {
  Tensor alpha({1}, {1.0}, DType::F64);
  alpha.set_requires_grad(true);
  Tensor x({3}, {2.0, 0.5, -1.0}, DType::F64);
  Tensor y = pact_forward(x, alpha);
  EXPECT_EQ(y.to_vector(), (std::vector<double>{1.0, 0.5, 0.0}));
  backward(sum(y));
  EXPECT_EQ(alpha.grad().item(), 1.0);
  Tensor q = pact_quant(Tensor({2}, {0.26, 3.0}, DType::F64), Tensor({1}, {1.0}, DType::F64), 2);
  EXPECT_NEAR(q.to_vector()[0], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(q.to_vector()[1], 1.0);
}

TEST(Qat, EmaInterceptorTracksRanges) {
  Model m = build_model("mlp-blobs", 1);
  auto qat = std::make_shared<QatInterceptor>(m, QatConfig{QatMethod::Ema, 8, 0.9, 6.0});
  m.set_interceptor(qat);
  Rng rng(2);
  Tensor x = random_tensor(rng, {8, 2}, -1, 1, DType::F32);
  Tensor eval_before = m.forward(x, Mode::Eval);
  EXPECT_TRUE(qat->ema_states().empty() || !qat->ema_states().begin()->second.initialized);
  m.forward(x, Mode::Train);
  ASSERT_EQ(qat->ema_states().size(), 2u);
  for (const auto& [site, st] : qat->ema_states()) {
    EXPECT_TRUE(st.initialized) << site;
    EXPECT_GE(st.running_max, st.running_min);
  }
  Tensor eval_after = m.forward(x, Mode::Eval);
  EXPECT_EQ(eval_after.shape(), eval_before.shape());
}

TEST(Qat, PactAlphasAreParametersAndClamped) {
  Model m = build_model("mlp-blobs", 1);
  QatInterceptor qat(m, QatConfig{QatMethod::Pact, 4, 0.999, 6.0});
  NamedTensors p = qat.parameters();
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].first, "relu1.pact_alpha");
  EXPECT_EQ(p[0].second.item(), 6.0);
  p[0].second.mutable_data()[0] = -1.0;
  qat.clamp_alphas();
  EXPECT_EQ(p[0].second.item(), kPactAlphaFloor);
}

TEST(Ptq, CalibrationJsonRoundTripAndAccuracy) {
  Model m = build_model("mlp-blobs", 4);
  Dataset ds = gen_blobs(50, 4, 0.3, 1);
  CalibrationStats st = calibrate(m, ds, 64);
  EXPECT_EQ(st.sites.size(), 3u);
  EXPECT_TRUE(st.sites.count("fc1.input"));
  CalibrationStats back = calibration_from_json(calibration_to_json(st));
  EXPECT_EQ(back.sites, st.sites);
  PtqModel q(m, st, PtqConfig{8, QuantMode::Asymmetric, false, ClipMode::None});
  Tensor yf = m.forward(ds.inputs, Mode::Eval);
  Tensor yq = q.forward(ds.inputs);
  double scale_out = 0.0;
  for (double v : yf.data()) scale_out = std::max(scale_out, std::abs(v));
  EXPECT_LE(nncomp::testing::max_abs_diff(yf, yq), 0.05 * scale_out);
  EXPECT_EQ(q.weight_params().size(), 3u);
}

TEST(Ptq, ActivationRangeModes) {
  RangeStats s = collect_stats({{-4.0, 1.0}, {-2.0, 3.0}});
  EXPECT_EQ(activation_range(s, ClipMode::None, 8), (std::pair<double, double>{-4.0, 3.0}));
  EXPECT_EQ(activation_range(s, ClipMode::Avg, 8), (std::pair<double, double>{-3.0, 2.0}));
  auto [lo, hi] = activation_range(s, ClipMode::Aciq, 4);
  EXPECT_GE(lo, -4.0);
  EXPECT_LE(hi, 3.0);
}
