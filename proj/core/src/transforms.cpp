// SPDX-License-Identifier: Apache-2.0
#include "nncomp/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "nncomp/error.hpp"
#include "nncomp/linalg.hpp"
#include "nncomp/ops.hpp"

namespace nncomp {

namespace {

// Drops indices along `axis` whose (index / group) lies in `removed`.
Tensor remove_slices(const Tensor& t, std::size_t axis, const std::set<std::size_t>& removed, std::size_t group = 1) {
  const Shape& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t extent = s[axis];
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < extent; ++i) {
    if (!removed.count(i / group)) keep.push_back(i);
  }
  Shape ns = s;
  ns[axis] = keep.size();
  auto v = t.data();
  std::vector<double> out;
  out.reserve(outer * keep.size() * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k : keep)
      for (std::size_t i = 0; i < inner; ++i) out.push_back(v[(o * extent + k) * inner + i]);
  return Tensor(ns, std::move(out), t.dtype());
}

// Builds a model from new specs, copying every parameter that keeps its name
// and shape from `params`.
Model rebuild(const Model& src, std::vector<LayerSpec> layers, std::vector<ExitBranch> exits,
              const std::map<std::string, Tensor>& params) {
  Model m(src.name(), src.sample_shape(), std::move(layers), src.dtype());
  for (auto& e : exits) m.add_exit(std::move(e));
  std::vector<std::string> names;
  for (const auto& [name, t] : m.parameters()) names.push_back(name);
  for (const auto& name : names) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    Tensor& t = m.param(name);
    if (it->second.shape() != t.shape()) {
      throw DimensionError("rebuilt parameter '" + name + "' changed shape");
    }
    auto dst = t.mutable_data();
    auto from = it->second.data();
    std::copy(from.begin(), from.end(), dst.begin());
  }
  for (const auto& l : m.layers()) {
    if (l.kind == LayerKind::BatchNorm2d) {
      bool ready = false;
      for (const auto& o : src.layers()) {
        if (o.id == l.id) ready = src.bn_stats_ready(l.id);
      }
      m.mark_bn_stats_ready(l.id, ready);
    }
  }
  m.set_interceptor(src.interceptor());
  return m;
}

std::map<std::string, Tensor> param_map(const Model& m) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m.parameters()) out.emplace(name, t);
  return out;
}

double masked_value(const Tensor& t, const Mask* mask, std::size_t i) {
  if (mask && mask->values.data()[i] == 0.0) return 0.0;
  return t.data()[i];
}

}  // namespace

ThinningPlan plan_thinning(const Model& model, const MaskSet& masks) {
  if (!model.exits().empty()) {
    throw ContractError("thinning supports sequential models only; this model has exit branches");
  }
  const auto& layers = model.layers();
  std::size_t last_parametric = layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].parametric()) last_parametric = i;
  }
  auto mask_of = [&](const std::string& name) -> const Mask* {
    auto it = masks.find(name);
    return it == masks.end() ? nullptr : &it->second;
  };
  ThinningPlan plan;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& prod = layers[i];
    if (!prod.parametric() || i == last_parametric) continue;
    ThinningStep step;
    step.producer = prod.id;
    bool relu_before_consumer = false;
    std::vector<const LayerSpec*> bns;
    for (std::size_t j = i + 1; j < layers.size(); ++j) {
      if (layers[j].parametric()) {
        step.consumer = layers[j].id;
        break;
      }
      if (layers[j].kind == LayerKind::BatchNorm2d) {
        if (relu_before_consumer) {
          throw ContractError("thinning: batch norm '" + layers[j].id + "' after a ReLU is not supported");
        }
        bns.push_back(&layers[j]);
        step.batchnorms.push_back(layers[j].id);
      }
      if (layers[j].kind == LayerKind::Relu) relu_before_consumer = true;
    }
    const Tensor& w = model.param(prod.id + ".weight");
    const Mask* wm = mask_of(prod.id + ".weight");
    const Tensor* b = prod.bias ? &model.param(prod.id + ".bias") : nullptr;
    const Mask* bm = mask_of(prod.id + ".bias");
    const std::size_t channels = w.size(0), per = w.numel() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      bool zero = true;
      for (std::size_t k = 0; k < per && zero; ++k) zero = masked_value(w, wm, c * per + k) == 0.0;
      if (zero && b) zero = masked_value(*b, bm, c) == 0.0;
      if (!zero) continue;
      double out = 0.0;
      for (const LayerSpec* bn : bns) {
        const double g = model.param(bn->id + ".gamma").data()[c];
        const double be = model.param(bn->id + ".beta").data()[c];
        const double mu = model.param(bn->id + ".running_mean").data()[c];
        const double var = model.param(bn->id + ".running_var").data()[c];
        out = (out - mu) / std::sqrt(var + bn->eps) * g + be;
      }
      if (relu_before_consumer) out = std::max(out, 0.0);
      if (out != 0.0) continue;
      step.channels.push_back(c);
    }
    if (step.channels.size() == channels) step.channels.pop_back();
    if (!step.channels.empty()) plan.steps.push_back(std::move(step));
  }
  return plan;
}

Model apply_thinning(const Model& model, const ThinningPlan& plan, MaskSet* masks) {
  if (plan.empty()) {
    return model.clone();
  }
  if (!model.exits().empty()) {
    throw ContractError("thinning supports sequential models only; this model has exit branches");
  }
  std::vector<LayerSpec> layers = model.layers();
  std::map<std::string, Tensor> params = param_map(model);
  const std::vector<Shape> shapes = model.layer_shapes();
  auto find = [&](const std::string& id) -> std::size_t {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].id == id) return i;
    }
    throw ContractError("thinning plan names unknown layer '" + id + "'");
  };
  auto thin = [&](const std::string& name, std::size_t axis, const std::set<std::size_t>& removed, std::size_t group) {
    auto it = params.find(name);
    if (it != params.end()) it->second = remove_slices(it->second, axis, removed, group);
    if (masks) {
      auto mt = masks->find(name);
      if (mt != masks->end()) mt->second.values = remove_slices(mt->second.values, axis, removed, group);
    }
  };
  for (const auto& step : plan.steps) {
    const std::size_t pi = find(step.producer), ci = find(step.consumer);
    if (!layers[pi].parametric() || !layers[ci].parametric() || ci <= pi) {
      throw ContractError("thinning plan does not match the model around '" + step.producer + "'");
    }
    const std::set<std::size_t> removed(step.channels.begin(), step.channels.end());
    if (removed.empty() || *removed.rbegin() >= layers[pi].out || removed.size() >= layers[pi].out) {
      throw ContractError("thinning plan removes invalid channels of '" + step.producer + "'");
    }
    thin(step.producer + ".weight", 0, removed, 1);
    thin(step.producer + ".bias", 0, removed, 1);
    layers[pi].out -= removed.size();
    for (const auto& bn_id : step.batchnorms) {
      const std::size_t bi = find(bn_id);
      for (const char* suffix : {".gamma", ".beta", ".running_mean", ".running_var"}) thin(bn_id + suffix, 0, removed, 1);
      layers[bi].out -= removed.size();
    }
    std::size_t group = 1;
    for (std::size_t j = pi + 1; j < ci; ++j) {
      if (layers[j].kind == LayerKind::Flatten) {
        const Shape& before = shapes[j - 1];
        group = before.size() == 3 ? before[1] * before[2] : 1;
      }
    }
    thin(step.consumer + ".weight", 1, removed, group);
    layers[ci].in -= removed.size() * group;
  }
  return rebuild(model, std::move(layers), {}, params);
}

Model truncated_svd_replace(const Model& model, const std::string& layer_id, std::size_t rank) {
  const LayerSpec& l = model.layer(layer_id);
  if (l.kind != LayerKind::Linear) throw ContractError("SVD replacement needs a linear layer, '" + layer_id + "' is not");
  const std::size_t out = l.out, in = l.in;
  if (rank < 1 || rank > std::min(out, in)) {
    throw ContractError("SVD rank " + std::to_string(rank) + " is outside [1, " + std::to_string(std::min(out, in)) + "]");
  }
  const Tensor& w = model.param(layer_id + ".weight");
  Matrix a(out, in);
  auto wv = w.data();
  std::copy(wv.begin(), wv.end(), a.data.begin());
  Svd svd = svd_jacobi(a);
  std::vector<double> wa(rank * in), wb(out * rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const double r = std::sqrt(svd.s[k]);
    for (std::size_t j = 0; j < in; ++j) wa[k * in + j] = r * svd.v(j, k);
    for (std::size_t i = 0; i < out; ++i) wb[i * rank + k] = svd.u(i, k) * r;
  }
  std::vector<LayerSpec> layers;
  for (const auto& x : model.layers()) {
    if (x.id != layer_id) {
      layers.push_back(x);
      continue;
    }
    layers.push_back(LayerSpec::linear(layer_id + "_a", in, rank, false));
    layers.push_back(LayerSpec::linear(layer_id + "_b", rank, out, l.bias));
  }
  std::vector<ExitBranch> exits = model.exits();
  for (auto& e : exits) {
    if (e.attach_after == layer_id) e.attach_after = layer_id + "_b";
  }
  std::map<std::string, Tensor> params = param_map(model);
  params.emplace(layer_id + "_a.weight", Tensor({rank, in}, std::move(wa), model.dtype()));
  params.emplace(layer_id + "_b.weight", Tensor({out, rank}, std::move(wb), model.dtype()));
  if (l.bias) params.emplace(layer_id + "_b.bias", params.at(layer_id + ".bias"));
  return rebuild(model, std::move(layers), std::move(exits), params);
}

Model fold_batchnorm(const Model& model) {
  const auto& src = model.layers();
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor> params = param_map(model);
  std::vector<ExitBranch> exits = model.exits();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const LayerSpec& l = src[i];
    if (l.kind == LayerKind::Conv2d && i + 1 < src.size() && src[i + 1].kind == LayerKind::BatchNorm2d) {
      const LayerSpec& bn = src[i + 1];
      if (!model.bn_stats_ready(bn.id)) {
        throw ContractError("batch norm '" + bn.id + "' has no running statistics; train or set them before folding");
      }
      auto g = model.param(bn.id + ".gamma").data();
      auto be = model.param(bn.id + ".beta").data();
      auto mu = model.param(bn.id + ".running_mean").data();
      auto var = model.param(bn.id + ".running_var").data();
      const Tensor& w = model.param(l.id + ".weight");
      const std::size_t cout = l.out, per = w.numel() / cout;
      std::vector<double> nw(w.numel()), nb(cout);
      auto wv = w.data();
      for (std::size_t c = 0; c < cout; ++c) {
        const double s = g[c] / std::sqrt(var[c] + bn.eps);
        for (std::size_t k = 0; k < per; ++k) nw[c * per + k] = wv[c * per + k] * s;
        const double b = l.bias ? model.param(l.id + ".bias").data()[c] : 0.0;
        nb[c] = (b - mu[c]) * s + be[c];
      }
      params.insert_or_assign(l.id + ".weight", Tensor(w.shape(), std::move(nw), model.dtype()));
      params.insert_or_assign(l.id + ".bias", Tensor({cout}, std::move(nb), model.dtype()));
      LayerSpec folded = l;
      folded.bias = true;
      layers.push_back(folded);
      for (auto& e : exits) {
        if (e.attach_after == bn.id) e.attach_after = l.id;
      }
      ++i;
      continue;
    }
    if (l.kind == LayerKind::BatchNorm2d) {
      throw ContractError("batch norm '" + l.id + "' does not directly follow a convolution");
    }
    layers.push_back(l);
  }
  return rebuild(model, std::move(layers), std::move(exits), params);
}

Model attach_exit(const Model& model, ExitBranch branch) {
  Model m = model.clone();
  m.add_exit(std::move(branch));
  return m;
}

std::vector<double> row_entropy(const Tensor& logits) {
  if (logits.dim() != 2) throw DimensionError("entropy needs 2-D logits, got " + shape_str(logits.shape()));
  NoGradGuard guard;
  Tensor lp = log_softmax(logits);
  const std::size_t n = logits.size(0), c = logits.size(1);
  auto v = lp.data();
  std::vector<double> h(n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < c; ++k) h[r] -= std::exp(v[r * c + k]) * v[r * c + k];
  return h;
}

ExitResult infer_with_exits(Model& model, const Tensor& x, double threshold) {
  if (!(threshold >= 0.0)) throw ContractError("exit threshold must be >= 0");
  NoGradGuard guard;
  std::vector<Tensor> heads = model.forward_heads(x, Mode::Eval);
  const std::size_t n = x.size(0), c = heads.back().size(1), exits = heads.size() - 1;
  const bool always_first = exits > 0 && threshold >= std::log(static_cast<double>(c));
  std::vector<std::vector<double>> entropy;
  for (std::size_t e = 0; e < exits; ++e) entropy.push_back(row_entropy(heads[e]));
  ExitResult r;
  r.exit_index.assign(n, exits);
  std::vector<double> out(n * c);
  for (std::size_t row = 0; row < n; ++row) {
    std::size_t pick = exits;
    if (always_first) {
      pick = 0;
    } else {
      for (std::size_t e = 0; e < exits; ++e) {
        if (entropy[e][row] < threshold) {
          pick = e;
          break;
        }
      }
    }
    r.exit_index[row] = pick;
    auto hv = heads[pick].data();
    std::copy(hv.begin() + row * c, hv.begin() + (row + 1) * c, out.begin() + row * c);
  }
  r.logits = Tensor({n, c}, std::move(out), heads.back().dtype());
  return r;
}

}  // namespace nncomp
