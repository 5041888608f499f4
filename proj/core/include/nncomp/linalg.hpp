// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace nncomp {

/// Dense row-major matrix in double precision.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
double frobenius_sq(const Matrix& a);

/// Thin SVD A = U diag(S) V^T with k = min(rows, cols): U is rows x k,
/// V is cols x k, S descending and non-negative.
struct Svd {
  Matrix u;
  std::vector<double> s;
  Matrix v;
};

/// One-sided Jacobi (Hestenes) rotations until every column pair is
/// orthogonal to `tol` relative.
Svd svd_jacobi(const Matrix& a, double tol = 1e-15, int max_sweeps = 100);

}  // namespace nncomp
