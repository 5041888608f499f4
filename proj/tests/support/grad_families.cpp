// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "nncomp/distill.hpp"
#include "nncomp/quantization.hpp"
#include "nncomp/regularization.hpp"
#include "testing.hpp"

namespace nncomp::testing {

namespace {

using Inputs = std::vector<Tensor>;

std::vector<std::int32_t> fixed_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> y(n);
  for (auto& v : y) v = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return y;
}

/// Values of [lo, hi] that keep `gap` away from every kink.
Tensor avoiding(Rng& rng, const Shape& shape, double lo, double hi, std::vector<double> kinks, double gap) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    for (;;) {
      x = rng.uniform(lo, hi);
      bool ok = true;
      for (double k : kinks) ok = ok && std::abs(x - k) > gap;
      if (ok) break;
    }
  }
  return Tensor(shape, std::move(v), DType::F64);
}

GradFamily unary(std::string name, Shape shape, std::function<Tensor(const Tensor&)> op) {
  return {name, [shape](Rng& r) { return Inputs{random_tensor(r, shape, -2.0, 2.0)}; },
          [op](const Inputs& in) { return weighted_sum(op(in[0]), 11); }};
}

}  // namespace

std::vector<GradFamily> gradient_families() {
  std::vector<GradFamily> f;
  const Shape s23{2, 3};

  f.push_back({"add", [s23](Rng& r) { return Inputs{random_tensor(r, s23), random_tensor(r, s23)}; },
               [](const Inputs& in) { return weighted_sum(add(in[0], in[1]), 1); }});
  f.push_back({"add_scalar", [s23](Rng& r) { return Inputs{random_tensor(r, s23), random_tensor(r, {1})}; },
               [](const Inputs& in) { return weighted_sum(add(in[0], in[1]), 2); }});
  f.push_back({"sub", [s23](Rng& r) { return Inputs{random_tensor(r, s23), random_tensor(r, s23)}; },
               [](const Inputs& in) { return weighted_sum(sub(in[0], in[1]), 3); }});
  f.push_back({"mul", [s23](Rng& r) { return Inputs{random_tensor(r, s23), random_tensor(r, s23)}; },
               [](const Inputs& in) { return weighted_sum(mul(in[0], in[1]), 4); }});
  f.push_back({"mul_scalar", [s23](Rng& r) { return Inputs{random_tensor(r, {1}), random_tensor(r, s23)}; },
               [](const Inputs& in) { return weighted_sum(mul(in[0], in[1]), 5); }});
  f.push_back(unary("scale", s23, [](const Tensor& x) { return scale(x, -1.7); }));
  f.push_back(unary("tanh", s23, [](const Tensor& x) { return tanh(x); }));
  f.push_back({"relu", [s23](Rng& r) { return Inputs{random_away_from_zero(r, s23, 1e-2)}; },
               [](const Inputs& in) { return weighted_sum(relu(in[0]), 6); }});
  f.push_back({"abs", [s23](Rng& r) { return Inputs{random_away_from_zero(r, s23, 1e-2)}; },
               [](const Inputs& in) { return weighted_sum(abs(in[0]), 7); }});
  f.push_back({"clamp", [s23](Rng& r) { return Inputs{avoiding(r, s23, -1.0, 1.0, {-0.5, 0.5}, 1e-2)}; },
               [](const Inputs& in) { return weighted_sum(clamp(in[0], -0.5, 0.5), 8); }});
  f.push_back(unary("sum", {3, 4}, [](const Tensor& x) { return sum(x); }));
  f.push_back(unary("mean", {3, 4}, [](const Tensor& x) { return mean(x); }));
  f.push_back(unary("max", {3, 4}, [](const Tensor& x) { return max(x); }));
  f.push_back(unary("min", {3, 4}, [](const Tensor& x) { return min(x); }));
  f.push_back(unary("softmax", {3, 4}, [](const Tensor& x) { return softmax(x); }));
  f.push_back(unary("log_softmax", {3, 4}, [](const Tensor& x) { return log_softmax(x); }));
  f.push_back(unary("transpose", {3, 4}, [](const Tensor& x) { return transpose(x); }));
  f.push_back(unary("reshape", {3, 4}, [](const Tensor& x) { return reshape(x, {2, 6}); }));
  f.push_back({"cross_entropy", [](Rng& r) { return Inputs{random_tensor(r, {5, 4}, -3.0, 3.0)}; },
               [](const Inputs& in) {
                 static const auto y = fixed_labels(5, 4, 21);
                 return cross_entropy(in[0], y);
               }});
  f.push_back({"kl_divergence", [](Rng& r) { return Inputs{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; },
               [](const Inputs& in) { return kl_divergence(softmax(in[0]), log_softmax(in[1])); }});
  f.push_back({"matmul", [](Rng& r) { return Inputs{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; },
               [](const Inputs& in) { return weighted_sum(matmul(in[0], in[1]), 9); }});
  f.push_back({"linear",
               [](Rng& r) { return Inputs{random_tensor(r, {3, 4}), random_tensor(r, {5, 4}), random_tensor(r, {5})}; },
               [](const Inputs& in) { return weighted_sum(linear(in[0], in[1], in[2]), 10); }});
  f.push_back({"linear_nobias", [](Rng& r) { return Inputs{random_tensor(r, {3, 4}), random_tensor(r, {5, 4})}; },
               [](const Inputs& in) { return weighted_sum(linear(in[0], in[1], Tensor()), 12); }});
  f.push_back({"conv2d_s1p0",
               [](Rng& r) {
                 return Inputs{random_tensor(r, {2, 2, 5, 5}), random_tensor(r, {3, 2, 3, 3}), random_tensor(r, {3})};
               },
               [](const Inputs& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 1, 0), 13); }});
  f.push_back({"conv2d_s2p1",
               [](Rng& r) {
                 return Inputs{random_tensor(r, {2, 2, 5, 5}), random_tensor(r, {3, 2, 3, 3}), random_tensor(r, {3})};
               },
               [](const Inputs& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1), 14); }});
  f.push_back(unary("maxpool2d", {2, 2, 4, 4}, [](const Tensor& x) { return maxpool2d(x, 2, 2); }));
  f.push_back({"batch_norm_train",
               [](Rng& r) {
                 return Inputs{random_tensor(r, {3, 2, 2, 2}), random_tensor(r, {2}, 0.5, 1.5), random_tensor(r, {2})};
               },
               [](const Inputs& in) {
                 Tensor rm = Tensor::zeros({2}, DType::F64), rv = Tensor::ones({2}, DType::F64);
                 return weighted_sum(batch_norm2d(in[0], in[1], in[2], rm, rv, 1e-5, 0.1, true), 15);
               }});
  f.push_back({"batch_norm_eval",
               [](Rng& r) {
                 return Inputs{random_tensor(r, {3, 2, 2, 2}), random_tensor(r, {2}, 0.5, 1.5), random_tensor(r, {2})};
               },
               [](const Inputs& in) {
                 Tensor rm = Tensor({2}, {0.3, -0.2}, DType::F64), rv = Tensor({2}, {0.5, 2.0}, DType::F64);
                 return weighted_sum(batch_norm2d(in[0], in[1], in[2], rm, rv, 1e-5, 0.1, false), 16);
               }});
  f.push_back({"lp_penalty_p1", [](Rng& r) { return Inputs{random_away_from_zero(r, {3, 4}, 1e-2)}; },
               [](const Inputs& in) { return lp_penalty(in[0], 0.3, 1); }});
  f.push_back({"lp_penalty_p2", [](Rng& r) { return Inputs{random_tensor(r, {3, 4})}; },
               [](const Inputs& in) { return lp_penalty(in[0], 0.3, 2); }});
  f.push_back({"group_lasso_filter", [](Rng& r) { return Inputs{random_tensor(r, {4, 2, 3, 3})}; },
               [](const Inputs& in) { return group_lasso_penalty(in[0], 0.7, LassoGrouping{}); }});
  f.push_back({"group_lasso_channel", [](Rng& r) { return Inputs{random_tensor(r, {4, 6})}; },
               [](const Inputs& in) {
                 return group_lasso_penalty(in[0], 0.7, LassoGrouping{LassoGrouping::Kind::Channel, 1, 1});
               }});
  f.push_back({"group_lasso_block", [](Rng& r) { return Inputs{random_tensor(r, {4, 6})}; },
               [](const Inputs& in) {
                 return group_lasso_penalty(in[0], 0.7, LassoGrouping{LassoGrouping::Kind::Block, 2, 3});
               }});
  f.push_back({"kd_loss", [](Rng& r) { return Inputs{random_tensor(r, {4, 3}, -2.0, 2.0)}; },
               [](const Inputs& in) {
                 static const auto y = fixed_labels(4, 3, 31);
                 static const Tensor teacher = [] {
                   Rng t(32);
                   return random_tensor(t, {4, 3}, -2.0, 2.0);
                 }();
                 return kd_loss(in[0], teacher, y, DistillSpec{2.5, 0.4, 0.6});
               }});
  f.push_back({"pact_alpha_and_x",
               [](Rng& r) {
                 Tensor alpha = random_tensor(r, {1}, 1.0, 3.0);
                 return Inputs{alpha, avoiding(r, {2, 5}, -2.0, 5.0, {0.0, alpha.item()}, 5e-2)};
               },
               [](const Inputs& in) { return weighted_sum(pact_forward(in[1], in[0]), 18); }});
  return f;
}

}  // namespace nncomp::testing
