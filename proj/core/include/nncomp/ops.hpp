// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "nncomp/tensor.hpp"

namespace nncomp {

// Elementwise binary ops accept identical shapes, or a single-element
// operand on either side. There is no other broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
/// Subgradient at zero is 0.
Tensor abs(const Tensor& x);
/// Gradient passes where lo < x < hi.
Tensor clamp(const Tensor& x, double lo, double hi);

// Full reductions to a scalar. max/min route the gradient to the first
// extremal element.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor max(const Tensor& x);
Tensor min(const Tensor& x);

// Row-wise over the last axis of a 1-D or 2-D tensor.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// Mean negative log-likelihood of integer labels under softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

/// KL(p || q) given p and log q, with 0·log 0 = 0. Summed over the last
/// axis and averaged over rows for 2-D input.
Tensor kl_divergence(const Tensor& p, const Tensor& log_q);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x[N×in] · W[out×in]ᵀ + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Cross-correlation (no kernel flip). b may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

/// Batch norm over N×C×H×W with per-channel affine. In training mode batch
/// statistics normalize the input and the running statistics are updated in
/// place with `momentum` (biased variance for normalization, unbiased for the
/// running estimate).
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, double eps, double momentum,
                    bool training);

Tensor reshape(const Tensor& x, Shape shape);

}  // namespace nncomp
