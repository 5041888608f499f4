// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "nncomp/pruning.hpp"
#include "nncomp/tensor.hpp"

namespace nncomp {

/// strength * sum |w|^p for p in {1, 2}. The subgradient of |w| at 0 is 0.
Tensor lp_penalty(const Tensor& w, double strength, int p);

/// Structured grouping for group lasso. Filter groups are output slices,
/// channel groups are input slices (columns of a 2-D weight), blocks tile a
/// 2-D weight.
struct LassoGrouping {
  enum class Kind { Filter, Channel, Block };
  Kind kind = Kind::Filter;
  std::size_t block_rows = 1;
  std::size_t block_cols = 1;

  bool operator==(const LassoGrouping&) const = default;
};

std::string lasso_grouping_name(const LassoGrouping& g);
Grouping make_lasso_grouping(const Shape& shape, const LassoGrouping& g);

/// strength * sum_g ||w_g||_2 with no group-size factor. All-zero groups
/// contribute zero gradient.
Tensor group_lasso_penalty(const Tensor& w, double strength, const LassoGrouping& grouping);

}  // namespace nncomp
