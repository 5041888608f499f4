// SPDX-License-Identifier: Apache-2.0
#include "nncomp/regularization.hpp"

#include <cmath>

#include "nncomp/error.hpp"
#include "nncomp/ops.hpp"

namespace nncomp {

Tensor lp_penalty(const Tensor& w, double strength, int p) {
  if (p != 1 && p != 2) throw ContractError("lp penalty supports p in {1, 2}, got " + std::to_string(p));
  if (strength < 0.0) throw ContractError("regularization strength must be >= 0");
  Tensor s = p == 1 ? sum(abs(w)) : sum(mul(w, w));
  return scale(s, strength);
}

std::string lasso_grouping_name(const LassoGrouping& g) {
  switch (g.kind) {
    case LassoGrouping::Kind::Filter: return "filter";
    case LassoGrouping::Kind::Channel: return "channel";
    case LassoGrouping::Kind::Block:
      return "block" + std::to_string(g.block_rows) + "x" + std::to_string(g.block_cols);
  }
  return "?";
}

Grouping make_lasso_grouping(const Shape& shape, const LassoGrouping& g) {
  switch (g.kind) {
    case LassoGrouping::Kind::Filter:
      return make_grouping(shape, Granularity::filter());
    case LassoGrouping::Kind::Block:
      return make_grouping(shape, Granularity::block(g.block_rows, g.block_cols));
    case LassoGrouping::Kind::Channel: {
      if (shape.size() != 4 && shape.size() != 2) {
        throw DimensionError("channel grouping needs a 4-D or 2-D weight, got " + shape_str(shape));
      }
      Grouping out;
      const std::size_t n = shape_numel(shape);
      const std::size_t inner = shape.size() == 4 ? shape[2] * shape[3] : 1;
      const std::size_t channels = shape[1];
      out.group_of.resize(n);
      for (std::size_t i = 0; i < n; ++i) out.group_of[i] = (i / inner) % channels;
      out.groups = channels;
      return out;
    }
  }
  throw ContractError("unknown lasso grouping");
}

Tensor group_lasso_penalty(const Tensor& w, double strength, const LassoGrouping& grouping) {
  if (strength < 0.0) throw ContractError("regularization strength must be >= 0");
  Grouping groups = make_lasso_grouping(w.shape(), grouping);
  auto v = w.data();
  std::vector<double> norms(groups.groups, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) norms[groups.group_of[i]] += v[i] * v[i];
  double total = 0.0;
  for (double& n : norms) {
    n = std::sqrt(n);
    total += n;
  }
  std::vector<double> wv(v.begin(), v.end());
  return record_op("group_lasso", {}, {strength * total}, w.dtype(), {w},
                   [wv = std::move(wv), norms = std::move(norms), gof = std::move(groups.group_of),
                    strength](std::span<const double> g) {
                     std::vector<double> dw(wv.size(), 0.0);
                     for (std::size_t i = 0; i < wv.size(); ++i) {
                       double n = norms[gof[i]];
                       if (n > 0.0) dw[i] = g[0] * strength * wv[i] / n;
                     }
                     return std::vector<std::vector<double>>{std::move(dw)};
                   });
}

}  // namespace nncomp
