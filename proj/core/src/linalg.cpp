// SPDX-License-Identifier: Apache-2.0
#include "nncomp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nncomp/error.hpp"

namespace nncomp {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw DimensionError("matrix product: inner extents differ");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

double frobenius_sq(const Matrix& a) {
  double s = 0.0;
  for (double x : a.data) s += x * x;
  return s;
}

namespace {

// Jacobi on the columns of a tall (rows >= cols) matrix.
Svd svd_tall(const Matrix& a, double tol, int max_sweeps) {
  const std::size_t m = a.rows, n = a.cols;
  Matrix w = a;
  Matrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (gamma == 0.0 || std::fabs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) throw NumericError("Jacobi SVD did not converge");

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  Svd out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = norms[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
    if (norms[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = w(i, j) / norms[j];
    }
  }
  // Columns for zero singular values: complete U with Gram-Schmidt against the basis.
  for (std::size_t k = 0; k < n; ++k) {
    if (out.s[k] > 0.0) continue;
    for (std::size_t e = 0; e < m; ++e) {
      std::vector<double> cand(m, 0.0);
      cand[e] = 1.0;
      for (std::size_t r = 0; r < n; ++r) {
        if (r == k || (out.s[r] == 0.0 && r > k)) continue;
        double d = 0.0;
        for (std::size_t i = 0; i < m; ++i) d += cand[i] * out.u(i, r);
        for (std::size_t i = 0; i < m; ++i) cand[i] -= d * out.u(i, r);
      }
      double nn = 0.0;
      for (double x : cand) nn += x * x;
      nn = std::sqrt(nn);
      if (nn > 1e-8) {
        for (std::size_t i = 0; i < m; ++i) out.u(i, k) = cand[i] / nn;
        break;
      }
    }
  }
  return out;
}

}  // namespace

Svd svd_jacobi(const Matrix& a, double tol, int max_sweeps) {
  if (a.rows == 0 || a.cols == 0) throw DimensionError("SVD of an empty matrix");
  for (double x : a.data) {
    if (!std::isfinite(x)) throw NumericError("SVD input is not finite");
  }
  if (a.rows >= a.cols) return svd_tall(a, tol, max_sweeps);
  Svd t = svd_tall(transpose(a), tol, max_sweeps);
  return Svd{std::move(t.v), std::move(t.s), std::move(t.u)};
}

}  // namespace nncomp
