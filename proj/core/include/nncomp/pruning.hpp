// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "nncomp/mask.hpp"
#include "nncomp/model.hpp"

namespace nncomp {

/// Pruning unit. Filters are output slices of a 4-D conv weight (rows of a
/// 2-D linear weight); blocks tile a 2-D weight.
struct Granularity {
  enum class Kind { Element, Block, Filter };
  Kind kind = Kind::Element;
  std::size_t block_rows = 1;
  std::size_t block_cols = 1;

  static Granularity element() { return {}; }
  static Granularity filter() { return {Kind::Filter, 1, 1}; }
  static Granularity block(std::size_t r, std::size_t c) { return {Kind::Block, r, c}; }
  bool operator==(const Granularity&) const = default;
};

std::string granularity_name(const Granularity& g);

/// Group membership of every element (group index per linear element) and
/// the number of groups. Throws DimensionError when `w` cannot be tiled.
struct Grouping {
  std::vector<std::size_t> group_of;
  std::size_t groups = 0;
};
Grouping make_grouping(const Shape& shape, const Granularity& g);

/// Keeps |w| >= s * sigma(W), sigma the population standard deviation.
Mask sensitivity_magnitude_mask(const Tensor& w, double s, std::string param_name = {});

/// Zeroes exactly floor(level * G) groups, lowest L1 norm first; ties go to
/// the lower group index.
Mask level_mask(const Tensor& w, double level, const Granularity& g, std::string param_name = {});

/// Zeroes the `count` lowest-L1 groups with the same tie rule.
Mask prune_lowest_groups(const Tensor& w, std::size_t count, const Granularity& g,
                         std::string param_name = {});

/// Gradual pruning schedule: target sparsity rises from `initial` at
/// `start_epoch` to `final` at `start_epoch + duration` along a cubic.
struct AgpState {
  double initial = 0.0;
  double final = 0.0;
  double start_epoch = 0.0;
  double duration = 1.0;  // n * frequency, in epochs
  double frequency = 1.0;

  void validate() const;
};

double agp_target(const AgpState& state, double epoch);

/// Splicing update with a hysteresis band: 0 below a*t, 1 above b*t,
/// unchanged in between.
Mask surgery_update(const Tensor& w, const Mask& prev, double t, double a, double b);

/// param <- param * mask, in place.
void apply_masks(Model& model, const MaskSet& masks);

Mask ones_mask(const Tensor& like, std::string param_name = {});

}  // namespace nncomp
