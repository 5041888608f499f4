// SPDX-License-Identifier: Apache-2.0
#include "nncomp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "nncomp/error.hpp"

namespace nncomp {

namespace {

using Grads = std::vector<std::vector<double>>;

// Splits [0, n) over worker threads in parallel mode. Each index is owned by
// exactly one thread, so per-element accumulation order never changes.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  unsigned workers = deterministic() ? 1u : std::max(1u, std::thread::hardware_concurrency());
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.dim() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must be " + std::to_string(rank) +
                         "-D, got " + shape_str(t.shape()));
  }
}

enum class Bcast { Same, ScalarA, ScalarB };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (a.numel() == 1) return Bcast::ScalarA;
  if (b.numel() == 1) return Bcast::ScalarB;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <typename F>
Tensor unary(const char* op, const Tensor& x, F value_fn,
             std::function<double(double x, double y)> deriv) {
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = value_fn(xs[i]);
  std::vector<double> xv(xs.begin(), xs.end());
  std::vector<double> yv = out;
  return record_op(op, x.shape(), std::move(out), x.dtype(), {x},
                   [xv = std::move(xv), yv = std::move(yv), deriv](std::span<const double> g) {
                     std::vector<double> dx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * deriv(xv[i], yv[i]);
                     return Grads{std::move(dx)};
                   });
}

// Reduce-to-scalar gradient for a single-element operand.
double reduce(std::span<const double> g) {
  double s = 0.0;
  for (double v : g) s += v;
  return s;
}

// Row layout of a 1-D or 2-D tensor for the softmax family.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& x, const char* op) {
  if (x.dim() == 1) return {1, x.size(0)};
  if (x.dim() == 2) return {x.size(0), x.size(1)};
  throw DimensionError(std::string(op) + ": expected 1-D or 2-D input, got " + shape_str(x.shape()));
}

std::vector<double> softmax_values(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    double m = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - m);
      s += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= s;
  }
  return y;
}

std::vector<double> log_softmax_values(std::span<const double> x, std::size_t rows,
                                       std::size_t cols) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    double m = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - m);
    double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto kind = broadcast_kind(a, b, "add");
  const Tensor& big = kind == Bcast::ScalarA ? b : a;
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = kind == Bcast::ScalarA ? av[0] : av[i];
    double y = kind == Bcast::ScalarB ? bv[0] : bv[i];
    out[i] = x + y;
  }
  return record_op("add", big.shape(), std::move(out), promote(a.dtype(), b.dtype()), {a, b},
                   [kind](std::span<const double> g) {
                     std::vector<double> full(g.begin(), g.end());
                     std::vector<double> ga = kind == Bcast::ScalarA ? std::vector<double>{reduce(g)} : full;
                     std::vector<double> gb = kind == Bcast::ScalarB ? std::vector<double>{reduce(g)} : full;
                     return Grads{std::move(ga), std::move(gb)};
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  auto kind = broadcast_kind(a, b, "mul");
  const Tensor& big = kind == Bcast::ScalarA ? b : a;
  std::vector<double> av(a.data().begin(), a.data().end());
  std::vector<double> bv(b.data().begin(), b.data().end());
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = kind == Bcast::ScalarA ? av[0] : av[i];
    double y = kind == Bcast::ScalarB ? bv[0] : bv[i];
    out[i] = x * y;
  }
  return record_op("mul", big.shape(), std::move(out), promote(a.dtype(), b.dtype()), {a, b},
                   [kind, av = std::move(av), bv = std::move(bv)](std::span<const double> g) {
                     std::vector<double> ga(av.size(), 0.0), gb(bv.size(), 0.0);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       double x = kind == Bcast::ScalarA ? av[0] : av[i];
                       double y = kind == Bcast::ScalarB ? bv[0] : bv[i];
                       ga[kind == Bcast::ScalarA ? 0 : i] += g[i] * y;
                       gb[kind == Bcast::ScalarB ? 0 : i] += g[i] * x;
                     }
                     return Grads{std::move(ga), std::move(gb)};
                   });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lower bound exceeds upper bound");
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  std::size_t n = x.numel();
  return record_op("sum", {}, {s}, x.dtype(), {x}, [n](std::span<const double> g) {
    return Grads{std::vector<double>(n, g[0])};
  });
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  std::size_t n = x.numel();
  return record_op("mean", {}, {s / static_cast<double>(n)}, x.dtype(), {x},
                   [n](std::span<const double> g) {
                     return Grads{std::vector<double>(n, g[0] / static_cast<double>(n))};
                   });
}

namespace {

Tensor extremum(const Tensor& x, bool want_max) {
  auto xs = x.data();
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (want_max ? xs[i] > xs[best] : xs[i] < xs[best]) best = i;
  }
  std::size_t n = xs.size();
  return record_op(want_max ? "max" : "min", {}, {xs[best]}, x.dtype(), {x},
                   [n, best](std::span<const double> g) {
                     std::vector<double> dx(n, 0.0);
                     dx[best] = g[0];
                     return Grads{std::move(dx)};
                   });
}

}  // namespace

Tensor max(const Tensor& x) { return extremum(x, true); }

Tensor min(const Tensor& x) { return extremum(x, false); }

Tensor softmax(const Tensor& x) {
  auto [rows, cols] = rows_cols(x, "softmax");
  auto y = softmax_values(x.data(), rows, cols);
  std::vector<double> yv = y;
  return record_op("softmax", x.shape(), std::move(y), x.dtype(), {x},
                   [yv = std::move(yv), rows = rows, cols = cols](std::span<const double> g) {
                     std::vector<double> dx(g.size());
                     for (std::size_t r = 0; r < rows; ++r) {
                       double dot = 0.0;
                       for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * yv[r * cols + c];
                       for (std::size_t c = 0; c < cols; ++c) {
                         dx[r * cols + c] = yv[r * cols + c] * (g[r * cols + c] - dot);
                       }
                     }
                     return Grads{std::move(dx)};
                   });
}

Tensor log_softmax(const Tensor& x) {
  auto [rows, cols] = rows_cols(x, "log_softmax");
  auto y = log_softmax_values(x.data(), rows, cols);
  std::vector<double> yv = y;
  return record_op("log_softmax", x.shape(), std::move(y), x.dtype(), {x},
                   [yv = std::move(yv), rows = rows, cols = cols](std::span<const double> g) {
                     std::vector<double> dx(g.size());
                     for (std::size_t r = 0; r < rows; ++r) {
                       double gs = 0.0;
                       for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                       for (std::size_t c = 0; c < cols; ++c) {
                         dx[r * cols + c] = g[r * cols + c] - std::exp(yv[r * cols + c]) * gs;
                       }
                     }
                     return Grads{std::move(dx)};
                   });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  std::size_t rows = logits.size(0), cols = logits.size(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
  }
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= cols) {
      throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range [0, " +
                          std::to_string(cols) + ")");
    }
  }
  auto lsm = log_softmax_values(logits.data(), rows, cols);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) loss -= lsm[r * cols + static_cast<std::size_t>(labels[r])];
  loss /= static_cast<double>(rows);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return record_op("cross_entropy", {}, {loss}, logits.dtype(), {logits},
                   [lsm = std::move(lsm), lab = std::move(lab), rows, cols](std::span<const double> g) {
                     std::vector<double> dx(rows * cols);
                     double k = g[0] / static_cast<double>(rows);
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t c = 0; c < cols; ++c) {
                         double p = std::exp(lsm[r * cols + c]);
                         double onehot = static_cast<std::size_t>(lab[r]) == c ? 1.0 : 0.0;
                         dx[r * cols + c] = k * (p - onehot);
                       }
                     }
                     return Grads{std::move(dx)};
                   });
}

Tensor kl_divergence(const Tensor& p, const Tensor& log_q) {
  require_same_shape(p, log_q, "kl_divergence");
  auto [rows, cols] = rows_cols(p, "kl_divergence");
  auto pv = p.data();
  auto lq = log_q.data();
  double kl = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] < 0.0) throw ContractError("kl_divergence: p has a negative entry");
    if (pv[i] > 0.0) kl += pv[i] * (std::log(pv[i]) - lq[i]);
  }
  double norm = p.dim() == 2 ? static_cast<double>(rows) : 1.0;
  kl /= norm;
  std::vector<double> pc(pv.begin(), pv.end()), lqc(lq.begin(), lq.end());
  (void)cols;
  return record_op("kl_divergence", {}, {kl}, promote(p.dtype(), log_q.dtype()), {p, log_q},
                   [pc = std::move(pc), lqc = std::move(lqc), norm](std::span<const double> g) {
                     std::vector<double> dp(pc.size()), dlq(pc.size());
                     double k = g[0] / norm;
                     for (std::size_t i = 0; i < pc.size(); ++i) {
                       dp[i] = pc[i] > 0.0 ? k * (std::log(pc[i]) - lqc[i] + 1.0) : 0.0;
                       dlq[i] = -k * pc[i];
                     }
                     return Grads{std::move(dp), std::move(dlq)};
                   });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "left operand");
  require_rank(b, 2, "matmul", "right operand");
  std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> av(a.data().begin(), a.data().end());
  std::vector<double> bv(b.data().begin(), b.data().end());
  std::vector<double> out(m * n, 0.0);
  parallel_for(m, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[p * n + j];
      out[i * n + j] = s;
    }
  });
  return record_op("matmul", {m, n}, std::move(out), promote(a.dtype(), b.dtype()), {a, b},
                   [av = std::move(av), bv = std::move(bv), m, k, n](std::span<const double> g) {
                     std::vector<double> da(m * k, 0.0), db(k * n, 0.0);
                     // dA = dC · Bᵀ
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double s = 0.0;
                         for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                         da[i * k + p] = s;
                       }
                     // dB = Aᵀ · dC
                     for (std::size_t p = 0; p < k; ++p)
                       for (std::size_t j = 0; j < n; ++j) {
                         double s = 0.0;
                         for (std::size_t i = 0; i < m; ++i) s += av[i * k + p] * g[i * n + j];
                         db[p * n + j] = s;
                       }
                     return Grads{std::move(da), std::move(db)};
                   });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose", "operand");
  std::size_t r = a.size(0), c = a.size(1);
  auto av = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return record_op("transpose", {c, r}, std::move(out), a.dtype(), {a},
                   [r, c](std::span<const double> g) {
                     std::vector<double> dx(r * c);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) dx[i * c + j] = g[j * r + i];
                     return Grads{std::move(dx)};
                   });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  std::size_t n = x.size(0), in = x.size(1), out_f = w.size(0);
  if (w.size(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (b.defined() && (b.dim() != 1 || b.size(0) != out_f)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  std::vector<double> xv(x.data().begin(), x.data().end());
  std::vector<double> wv(w.data().begin(), w.data().end());
  auto bv = b.defined() ? b.data() : std::span<const double>{};
  std::vector<double> y(n * out_f);
  parallel_for(n, [&](std::size_t r) {
    for (std::size_t o = 0; o < out_f; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += xv[r * in + i] * wv[o * in + i];
      y[r * out_f + o] = s + (bv.empty() ? 0.0 : bv[o]);
    }
  });
  DType dt = promote(x.dtype(), w.dtype());
  bool has_bias = b.defined();
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return record_op("linear", {n, out_f}, std::move(y), dt, std::move(inputs),
                   [xv = std::move(xv), wv = std::move(wv), n, in, out_f,
                    has_bias](std::span<const double> g) {
                     std::vector<double> dx(n * in, 0.0), dw(out_f * in, 0.0);
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t o = 0; o < out_f; ++o) {
                         double go = g[r * out_f + o];
                         if (go == 0.0) continue;
                         for (std::size_t i = 0; i < in; ++i) {
                           dx[r * in + i] += go * wv[o * in + i];
                           dw[o * in + i] += go * xv[r * in + i];
                         }
                       }
                     Grads grads{std::move(dx), std::move(dw)};
                     if (has_bias) {
                       std::vector<double> db(out_f, 0.0);
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t o = 0; o < out_f; ++o) db[o] += g[r * out_f + o];
                       grads.push_back(std::move(db));
                     }
                     return grads;
                   });
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  if (stride == 0) throw DimensionError("conv: stride must be positive");
  std::size_t padded = in + 2 * padding;
  if (kernel == 0 || padded < kernel || (padded - kernel) % stride != 0) {
    throw DimensionError("conv: output extent (" + std::to_string(in) + "+2*" +
                         std::to_string(padding) + "-" + std::to_string(kernel) + ")/" +
                         std::to_string(stride) + "+1 is not integral");
  }
  return (padded - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  const std::size_t N = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Co = w.size(0), Kh = w.size(2), Kw = w.size(3);
  if (w.size(1) != Ci) {
    throw DimensionError("conv2d: input channels of " + shape_str(x.shape()) +
                         " do not match weight " + shape_str(w.shape()));
  }
  if (b.defined() && (b.dim() != 1 || b.size(0) != Co)) {
    throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t Ho = conv_out_extent(H, Kh, stride, padding);
  const std::size_t Wo = conv_out_extent(W, Kw, stride, padding);
  std::vector<double> xv(x.data().begin(), x.data().end());
  std::vector<double> wv(w.data().begin(), w.data().end());
  auto bv = b.defined() ? b.data() : std::span<const double>{};
  std::vector<double> y(N * Co * Ho * Wo);

  // Visits every (input, weight) pair contributing to output (n, co, oh, ow).
  auto for_taps = [=](std::size_t oh, std::size_t ow, auto&& fn) {
    for (std::size_t ci = 0; ci < Ci; ++ci)
      for (std::size_t kh = 0; kh < Kh; ++kh) {
        std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - static_cast<std::ptrdiff_t>(padding);
        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kw = 0; kw < Kw; ++kw) {
          std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kw) - static_cast<std::ptrdiff_t>(padding);
          if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
          fn((ci * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw),
             (ci * Kh + kh) * Kw + kw);
        }
      }
  };

  parallel_for(N, [&](std::size_t n) {
    const double* xn = xv.data() + n * Ci * H * W;
    for (std::size_t co = 0; co < Co; ++co) {
      const double* wc = wv.data() + co * Ci * Kh * Kw;
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double s = 0.0;
          for_taps(oh, ow, [&](std::size_t xi, std::size_t wi) { s += xn[xi] * wc[wi]; });
          y[((n * Co + co) * Ho + oh) * Wo + ow] = s + (bv.empty() ? 0.0 : bv[co]);
        }
    }
  });

  bool has_bias = b.defined();
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return record_op(
      "conv2d", {N, Co, Ho, Wo}, std::move(y), promote(x.dtype(), w.dtype()), std::move(inputs),
      [xv = std::move(xv), wv = std::move(wv), N, Ci, H, W, Co, Kh, Kw, Ho, Wo, has_bias,
       for_taps](std::span<const double> g) {
        std::vector<double> dx(N * Ci * H * W, 0.0), dw(Co * Ci * Kh * Kw, 0.0);
        for (std::size_t n = 0; n < N; ++n) {
          const double* xn = xv.data() + n * Ci * H * W;
          double* dxn = dx.data() + n * Ci * H * W;
          for (std::size_t co = 0; co < Co; ++co) {
            const double* wc = wv.data() + co * Ci * Kh * Kw;
            double* dwc = dw.data() + co * Ci * Kh * Kw;
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                double go = g[((n * Co + co) * Ho + oh) * Wo + ow];
                if (go == 0.0) continue;
                for_taps(oh, ow, [&](std::size_t xi, std::size_t wi) {
                  dxn[xi] += go * wc[wi];
                  dwc[wi] += go * xn[xi];
                });
              }
          }
        }
        Grads grads{std::move(dx), std::move(dw)};
        if (has_bias) {
          std::vector<double> db(Co, 0.0);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Co; ++co)
              for (std::size_t p = 0; p < Ho * Wo; ++p) db[co] += g[(n * Co + co) * Ho * Wo + p];
          grads.push_back(std::move(db));
        }
        return grads;
      });
}

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "maxpool2d", "input");
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (kernel == 0 || stride == 0 || H < kernel || W < kernel) {
    throw DimensionError("maxpool2d: kernel " + std::to_string(kernel) + " does not fit input " +
                         shape_str(x.shape()));
  }
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  auto xv = x.data();
  std::vector<double> y(N * C * Ho * Wo);
  std::vector<std::size_t> arg(y.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = nc * H * W + (oh * stride) * W + ow * stride;
        for (std::size_t kh = 0; kh < kernel; ++kh)
          for (std::size_t kw = 0; kw < kernel; ++kw) {
            std::size_t idx = nc * H * W + (oh * stride + kh) * W + ow * stride + kw;
            if (xv[idx] > xv[best]) best = idx;
          }
        std::size_t o = (nc * Ho + oh) * Wo + ow;
        y[o] = xv[best];
        arg[o] = best;
      }
  std::size_t in_n = x.numel();
  return record_op("maxpool2d", {N, C, Ho, Wo}, std::move(y), x.dtype(), {x},
                   [arg = std::move(arg), in_n](std::span<const double> g) {
                     std::vector<double> dx(in_n, 0.0);
                     for (std::size_t o = 0; o < g.size(); ++o) dx[arg[o]] += g[o];
                     return Grads{std::move(dx)};
                   });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, double eps, double momentum,
                    bool training) {
  require_rank(x, 4, "batch_norm2d", "input");
  const std::size_t N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->dim() != 1 || t->size(0) != C) {
      throw DimensionError("batch_norm2d: per-channel parameter " + shape_str(t->shape()) +
                           " does not match input " + shape_str(x.shape()));
    }
  }
  const std::size_t M = N * HW;
  if (training && M < 2) {
    throw ContractError("batch_norm2d: training mode needs more than one value per channel");
  }
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> mu(C), invstd(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) s += xv[(n * C + c) * HW + p];
      double m = s / static_cast<double>(M);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          double d = xv[(n * C + c) * HW + p] - m;
          v += d * d;
        }
      v /= static_cast<double>(M);
      mu[c] = m;
      invstd[c] = 1.0 / std::sqrt(v + eps);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[c] = (1.0 - momentum) * rm[c] + momentum * m;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * v * static_cast<double>(M) / static_cast<double>(M - 1);
    }
    running_mean.round_to_dtype();
    running_var.round_to_dtype();
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }
  std::vector<double> xhat(x.numel()), y(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        std::size_t i = (n * C + c) * HW + p;
        xhat[i] = (xv[i] - mu[c]) * invstd[c];
        y[i] = gv[c] * xhat[i] + bv[c];
      }
  std::vector<double> gcopy(gv.begin(), gv.end());
  return record_op(
      "batch_norm2d", x.shape(), std::move(y), promote(x.dtype(), gamma.dtype()),
      {x, gamma, beta},
      [xhat = std::move(xhat), invstd = std::move(invstd), gcopy = std::move(gcopy), N, C, HW, M,
       training](std::span<const double> g) {
        std::vector<double> dx(g.size()), dgamma(C, 0.0), dbeta(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              std::size_t i = (n * C + c) * HW + p;
              sg += g[i];
              sgx += g[i] * xhat[i];
            }
          dgamma[c] = sgx;
          dbeta[c] = sg;
          double k = gcopy[c] * invstd[c];
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              std::size_t i = (n * C + c) * HW + p;
              if (training) {
                dx[i] = k * (g[i] - sg / static_cast<double>(M) - xhat[i] * sgx / static_cast<double>(M));
              } else {
                dx[i] = k * g[i];
              }
            }
        }
        return Grads{std::move(dx), std::move(dgamma), std::move(dbeta)};
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> v(x.data().begin(), x.data().end());
  return record_op("reshape", std::move(shape), std::move(v), x.dtype(), {x},
                   [](std::span<const double> g) {
                     return Grads{std::vector<double>(g.begin(), g.end())};
                   });
}

}  // namespace nncomp
