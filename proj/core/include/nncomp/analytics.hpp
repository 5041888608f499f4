// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nncomp/csv.hpp"
#include "nncomp/data.hpp"
#include "nncomp/mask.hpp"
#include "nncomp/model.hpp"
#include "nncomp/pruning.hpp"

namespace nncomp {

struct SparsityRow {
  std::string name;
  Shape shape;
  std::size_t numel = 0;
  /// Elements that are bitwise 0.0 (either sign).
  std::size_t zeros = 0;
  /// Zero entries of the parameter's mask, 0 without a mask.
  std::size_t mask_zeros = 0;
  double sparsity() const noexcept { return numel ? static_cast<double>(zeros) / static_cast<double>(numel) : 0.0; }
};

struct SparsityReport {
  std::vector<SparsityRow> rows;
  SparsityRow totals;
};

/// Weight tensors of linear/conv layers only, unless `all_parameters`.
SparsityReport sparsity_summary(const Model& model, const MaskSet& masks, bool all_parameters = false);
/// Columns: name, shape, numel, zeros, sparsity, mask_zeros; last row "total".
CsvTable to_csv(const SparsityReport& report);

struct LayerCost {
  std::string layer;
  std::string kind;
  Shape output_shape;
  std::size_t params = 0;
  std::size_t macs = 0;
};

struct CostReport {
  std::vector<LayerCost> rows;
  std::size_t total_params = 0;
  std::size_t total_macs = 0;
};

/// Per-sample MACs: conv Cin*Kh*Kw*Cout*H'*W', linear in*out; trunk layers
/// first, then exit branch layers.
CostReport macs_params_summary(const Model& model, const Shape& sample_shape);
/// Columns: layer, kind, output_shape, params, macs; last row "total".
CsvTable to_csv(const CostReport& report);

struct ApozRow {
  std::string site;
  std::size_t channel = 0;
  double apoz = 0.0;
};

/// Fraction of exactly-zero outputs per channel of every ReLU site (axis 1)
/// over eval-mode forwards of `data`.
std::vector<ApozRow> activation_stats(Model& model, const Dataset& data, std::size_t batch_size = 256);
/// Columns: site, channel, apoz.
CsvTable to_csv(const std::vector<ApozRow>& rows);

struct SensitivityRow {
  std::string param;
  double level = 0.0;
  double accuracy = 0.0;
};

/// For each linear/conv weight and level, prunes that weight alone on a copy
/// and evaluates. The model is not modified.
std::vector<SensitivityRow> sensitivity_scan(const Model& model, const Dataset& data,
                                             const std::vector<double>& levels,
                                             const Granularity& granularity = Granularity::element());
/// Columns: param, level, accuracy.
CsvTable to_csv(const std::vector<SensitivityRow>& rows);

/// Writes `<dir>/<run_id>.<report>.csv` and returns the path.
std::filesystem::path write_report(const std::filesystem::path& dir, const std::string& run_id,
                                   const std::string& report, const CsvTable& table);

}  // namespace nncomp
