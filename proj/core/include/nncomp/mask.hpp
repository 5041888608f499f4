// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "nncomp/tensor.hpp"

namespace nncomp {

/// Binary pruning mask paired with a named parameter; values are exactly 0 or 1
/// and the shape equals the parameter's.
struct Mask {
  std::string param_name;
  Tensor values;

  std::size_t zeros() const;
  double sparsity() const;
};

/// Live masks keyed by parameter name.
using MaskSet = std::map<std::string, Mask>;

}  // namespace nncomp
