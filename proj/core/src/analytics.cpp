// SPDX-License-Identifier: Apache-2.0
#include "nncomp/analytics.hpp"

#include <map>

#include "nncomp/error.hpp"
#include "nncomp/training.hpp"

namespace nncomp {

namespace {

bool is_weight(const Model& model, const std::string& name) {
  for (const auto& l : model.layers()) {
    if (l.parametric() && name == l.id + ".weight") return true;
  }
  for (const auto& e : model.exits())
    for (const auto& l : e.layers) {
      if (l.parametric() && name == l.id + ".weight") return true;
    }
  return false;
}

LayerCost layer_cost(const LayerSpec& l, const Shape& out) {
  LayerCost c;
  c.layer = l.id;
  c.kind = layer_kind_name(l.kind);
  c.output_shape = out;
  if (l.kind == LayerKind::Linear) {
    c.params = l.in * l.out + (l.bias ? l.out : 0);
    c.macs = l.in * l.out;
  } else if (l.kind == LayerKind::Conv2d) {
    c.params = l.in * l.out * l.kernel * l.kernel + (l.bias ? l.out : 0);
    c.macs = l.in * l.kernel * l.kernel * l.out * out[1] * out[2];
  } else if (l.kind == LayerKind::BatchNorm2d) {
    c.params = 2 * l.out;
  }
  return c;
}

}  // namespace

SparsityReport sparsity_summary(const Model& model, const MaskSet& masks, bool all_parameters) {
  SparsityReport r;
  r.totals.name = "total";
  for (const auto& [name, t] : model.parameters()) {
    if (!all_parameters && !is_weight(model, name)) continue;
    SparsityRow row;
    row.name = name;
    row.shape = t.shape();
    row.numel = t.numel();
    for (double v : t.data()) row.zeros += v == 0.0;
    auto it = masks.find(name);
    if (it != masks.end()) {
      for (double v : it->second.values.data()) row.mask_zeros += v == 0.0;
    }
    r.totals.numel += row.numel;
    r.totals.zeros += row.zeros;
    r.totals.mask_zeros += row.mask_zeros;
    r.rows.push_back(std::move(row));
  }
  return r;
}

CsvTable to_csv(const SparsityReport& report) {
  CsvTable t;
  t.header = {"name", "shape", "numel", "zeros", "sparsity", "mask_zeros"};
  auto emit = [&](const SparsityRow& r) {
    t.rows.push_back({r.name, format_shape(r.shape), std::to_string(r.numel), std::to_string(r.zeros),
                      format_double(r.sparsity()), std::to_string(r.mask_zeros)});
  };
  for (const auto& r : report.rows) emit(r);
  emit(report.totals);
  return t;
}

CostReport macs_params_summary(const Model& model, const Shape& sample_shape) {
  CostReport r;
  std::vector<Shape> trunk;
  Shape s = sample_shape;
  for (const auto& l : model.layers()) {
    Shape out = infer_layer_shape(l, s);
    r.rows.push_back(layer_cost(l, out));
    trunk.push_back(out);
    s = out;
  }
  for (const auto& e : model.exits()) {
    Shape bs = trunk[model.layer_index(e.attach_after)];
    for (const auto& l : e.layers) {
      Shape out = infer_layer_shape(l, bs);
      r.rows.push_back(layer_cost(l, out));
      bs = out;
    }
  }
  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
  }
  return r;
}

CsvTable to_csv(const CostReport& report) {
  CsvTable t;
  t.header = {"layer", "kind", "output_shape", "params", "macs"};
  for (const auto& r : report.rows) {
    t.rows.push_back({r.layer, r.kind, format_shape(r.output_shape), std::to_string(r.params), std::to_string(r.macs)});
  }
  t.rows.push_back({"total", "", "", std::to_string(report.total_params), std::to_string(report.total_macs)});
  return t;
}

std::vector<ApozRow> activation_stats(Model& model, const Dataset& data, std::size_t batch_size) {
  bool has_relu = false;
  for (const auto& l : model.layers()) has_relu = has_relu || l.kind == LayerKind::Relu;
  if (!has_relu) throw ContractError("activation statistics need at least one ReLU site");
  data.validate();
  NoGradGuard guard;
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> counts;
  MinibatchStream stream(data, batch_size, SamplerSpec{}, 0);
  while (auto b = stream.next()) {
    model.forward_observed(b->x, Mode::Eval, [&](const LayerSpec& l, const Tensor&, const Tensor& out) {
      if (l.kind != LayerKind::Relu) return;
      const std::size_t n = out.size(0), c = out.size(1), inner = out.numel() / (n * c);
      auto [it, fresh] = counts.try_emplace(l.id);
      if (fresh) {
        order.push_back(l.id);
        it->second.first.assign(c, 0);
        it->second.second.assign(c, 0);
      }
      auto v = out.data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const std::size_t ch = (i / inner) % c;
        it->second.first[ch] += v[i] == 0.0;
        ++it->second.second[ch];
      }
    });
  }
  std::vector<ApozRow> rows;
  for (const auto& site : order) {
    const auto& [zeros, totals] = counts.at(site);
    for (std::size_t c = 0; c < zeros.size(); ++c) {
      rows.push_back({site, c, static_cast<double>(zeros[c]) / static_cast<double>(totals[c])});
    }
  }
  return rows;
}

CsvTable to_csv(const std::vector<ApozRow>& rows) {
  CsvTable t;
  t.header = {"site", "channel", "apoz"};
  for (const auto& r : rows) t.rows.push_back({r.site, std::to_string(r.channel), format_double(r.apoz)});
  return t;
}

std::vector<SensitivityRow> sensitivity_scan(const Model& model, const Dataset& data,
                                             const std::vector<double>& levels, const Granularity& granularity) {
  if (levels.empty()) throw ContractError("sensitivity scan needs at least one level");
  for (double l : levels) {
    if (!(l >= 0.0 && l < 1.0)) throw ContractError("sensitivity levels must lie in [0, 1)");
  }
  std::vector<SensitivityRow> rows;
  for (const auto& l : model.layers()) {
    if (!l.parametric()) continue;
    const std::string name = l.id + ".weight";
    for (double level : levels) {
      Model copy = model.clone();
      copy.set_interceptor(nullptr);
      MaskSet masks;
      masks.emplace(name, level_mask(copy.param(name), level, granularity, name));
      apply_masks(copy, masks);
      rows.push_back({name, level, evaluate(copy, data)});
    }
  }
  return rows;
}

CsvTable to_csv(const std::vector<SensitivityRow>& rows) {
  CsvTable t;
  t.header = {"param", "level", "accuracy"};
  for (const auto& r : rows) t.rows.push_back({r.param, format_double(r.level), format_double(r.accuracy)});
  return t;
}

std::filesystem::path write_report(const std::filesystem::path& dir, const std::string& run_id,
                                   const std::string& report, const CsvTable& table) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::filesystem::path p = dir / (run_id + "." + report + ".csv");
  save_csv(table, p);
  return p;
}

}  // namespace nncomp
