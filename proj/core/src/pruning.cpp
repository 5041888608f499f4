// SPDX-License-Identifier: Apache-2.0
#include "nncomp/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nncomp/error.hpp"

namespace nncomp {

std::string granularity_name(const Granularity& g) {
  switch (g.kind) {
    case Granularity::Kind::Element: return "element";
    case Granularity::Kind::Filter: return "filter";
    case Granularity::Kind::Block:
      return "block" + std::to_string(g.block_rows) + "x" + std::to_string(g.block_cols);
  }
  return "?";
}

Grouping make_grouping(const Shape& shape, const Granularity& g) {
  Grouping out;
  const std::size_t n = shape_numel(shape);
  out.group_of.resize(n);
  switch (g.kind) {
    case Granularity::Kind::Element:
      std::iota(out.group_of.begin(), out.group_of.end(), std::size_t{0});
      out.groups = n;
      break;
    case Granularity::Kind::Filter: {
      if (shape.size() != 4 && shape.size() != 2) {
        throw DimensionError("filter granularity needs a 4-D (or 2-D) weight, got " + shape_str(shape));
      }
      const std::size_t per = n / shape[0];
      for (std::size_t i = 0; i < n; ++i) out.group_of[i] = i / per;
      out.groups = shape[0];
      break;
    }
    case Granularity::Kind::Block: {
      if (shape.size() != 2) {
        throw DimensionError("block granularity needs a 2-D weight, got " + shape_str(shape));
      }
      const std::size_t r = g.block_rows, c = g.block_cols;
      if (r == 0 || c == 0 || shape[0] % r != 0 || shape[1] % c != 0) {
        throw DimensionError("block " + std::to_string(r) + "x" + std::to_string(c) +
                             " does not divide weight " + shape_str(shape));
      }
      const std::size_t bcols = shape[1] / c;
      for (std::size_t i = 0; i < shape[0]; ++i)
        for (std::size_t j = 0; j < shape[1]; ++j) out.group_of[i * shape[1] + j] = (i / r) * bcols + j / c;
      out.groups = (shape[0] / r) * bcols;
      break;
    }
  }
  return out;
}

Mask ones_mask(const Tensor& like, std::string param_name) {
  return Mask{std::move(param_name), Tensor::ones(like.shape())};
}

Mask sensitivity_magnitude_mask(const Tensor& w, double s, std::string param_name) {
  if (!(s > 0.0)) throw ContractError("sensitivity must be positive, got " + std::to_string(s));
  auto v = w.data();
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double threshold = s * std::sqrt(var / n);
  std::vector<double> m(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = std::fabs(v[i]) >= threshold ? 1.0 : 0.0;
  return Mask{std::move(param_name), Tensor(w.shape(), std::move(m))};
}

Mask prune_lowest_groups(const Tensor& w, std::size_t count, const Granularity& g,
                         std::string param_name) {
  Grouping grouping = make_grouping(w.shape(), g);
  if (count > grouping.groups) throw ContractError("cannot prune more groups than exist");
  std::vector<double> norms(grouping.groups, 0.0);
  auto v = w.data();
  for (std::size_t i = 0; i < v.size(); ++i) norms[grouping.group_of[i]] += std::fabs(v[i]);
  std::vector<std::size_t> order(grouping.groups);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
  std::vector<char> pruned(grouping.groups, 0);
  for (std::size_t k = 0; k < count; ++k) pruned[order[k]] = 1;
  std::vector<double> m(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = pruned[grouping.group_of[i]] ? 0.0 : 1.0;
  return Mask{std::move(param_name), Tensor(w.shape(), std::move(m))};
}

Mask level_mask(const Tensor& w, double level, const Granularity& g, std::string param_name) {
  if (!(level >= 0.0 && level < 1.0)) {
    throw ContractError("pruning level must lie in [0, 1), got " + std::to_string(level));
  }
  Grouping grouping = make_grouping(w.shape(), g);
  auto count = static_cast<std::size_t>(std::floor(level * static_cast<double>(grouping.groups)));
  return prune_lowest_groups(w, count, g, std::move(param_name));
}

void AgpState::validate() const {
  if (!(initial >= 0.0 && initial < 1.0 && final >= 0.0 && final < 1.0)) {
    throw ContractError("AGP sparsities must lie in [0, 1)");
  }
  if (final < initial) throw ContractError("AGP final sparsity must be >= initial sparsity");
  if (!(duration > 0.0)) throw ContractError("AGP duration must be positive");
  if (!(frequency > 0.0)) throw ContractError("AGP frequency must be positive");
}

double agp_target(const AgpState& s, double epoch) {
  if (epoch <= s.start_epoch) return s.initial;
  if (epoch >= s.start_epoch + s.duration) return s.final;
  const double r = 1.0 - (epoch - s.start_epoch) / s.duration;
  return s.final + (s.initial - s.final) * r * r * r;
}

Mask surgery_update(const Tensor& w, const Mask& prev, double t, double a, double b) {
  if (a > b) throw ContractError("surgery: lower hysteresis factor exceeds upper factor");
  if (prev.values.shape() != w.shape()) {
    throw DimensionError("surgery: previous mask " + shape_str(prev.values.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  }
  auto v = w.data();
  auto p = prev.values.data();
  std::vector<double> m(v.size());
  const double lo = a * t, hi = b * t;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double mag = std::fabs(v[i]);
    m[i] = mag < lo ? 0.0 : (mag > hi ? 1.0 : p[i]);
  }
  return Mask{prev.param_name, Tensor(w.shape(), std::move(m))};
}

void apply_masks(Model& model, const MaskSet& masks) {
  for (const auto& [name, mask] : masks) {
    if (!model.has_param(name)) throw ContractError("mask refers to unknown parameter '" + name + "'");
    Tensor& p = model.param(name);
    if (p.shape() != mask.values.shape()) {
      throw DimensionError("mask for '" + name + "' has shape " + shape_str(mask.values.shape()) +
                           ", parameter is " + shape_str(p.shape()));
    }
  }
  for (const auto& [name, mask] : masks) {
    auto w = model.param(name).mutable_data();
    auto m = mask.values.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (m[i] == 0.0) w[i] = 0.0;
    }
  }
}

}  // namespace nncomp
