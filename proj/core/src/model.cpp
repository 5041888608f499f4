// SPDX-License-Identifier: Apache-2.0
#include "nncomp/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "nncomp/error.hpp"
#include "nncomp/mask.hpp"
#include "nncomp/ops.hpp"
#include "nncomp/rng.hpp"

namespace nncomp {

std::size_t Mask::zeros() const {
  std::size_t z = 0;
  for (double v : values.data()) z += (v == 0.0);
  return z;
}

double Mask::sparsity() const {
  return static_cast<double>(zeros()) / static_cast<double>(values.numel());
}

const char* layer_kind_name(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm2d: return "batchnorm2d";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::MaxPool2d: return "maxpool2d";
  }
  return "?";
}

namespace {

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::Linear, LayerKind::Conv2d, LayerKind::Relu, LayerKind::BatchNorm2d,
                 LayerKind::Flatten, LayerKind::MaxPool2d}) {
    if (s == layer_kind_name(k)) return k;
  }
  throw ContractError("unknown layer kind '" + s + "'");
}

std::vector<std::string> param_suffixes(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Linear:
    case LayerKind::Conv2d:
      return l.bias ? std::vector<std::string>{"weight", "bias"} : std::vector<std::string>{"weight"};
    case LayerKind::BatchNorm2d:
      return {"gamma", "beta", "running_mean", "running_var"};
    default:
      return {};
  }
}

Shape param_shape(const LayerSpec& l, const std::string& suffix) {
  if (l.kind == LayerKind::Linear) {
    return suffix == "weight" ? Shape{l.out, l.in} : Shape{l.out};
  }
  if (l.kind == LayerKind::Conv2d) {
    return suffix == "weight" ? Shape{l.out, l.in, l.kernel, l.kernel} : Shape{l.out};
  }
  return Shape{l.out};
}

}  // namespace

LayerSpec LayerSpec::linear(std::string id, std::size_t in, std::size_t out, bool bias) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::Linear;
  l.in = in;
  l.out = out;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::conv2d(std::string id, std::size_t in, std::size_t out, std::size_t kernel,
                            std::size_t stride, std::size_t padding, bool bias) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::Conv2d;
  l.in = in;
  l.out = out;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::relu(std::string id) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::Relu;
  return l;
}

LayerSpec LayerSpec::batchnorm2d(std::string id, std::size_t channels, double eps, double momentum) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::BatchNorm2d;
  l.in = channels;
  l.out = channels;
  l.eps = eps;
  l.momentum = momentum;
  return l;
}

LayerSpec LayerSpec::flatten(std::string id) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::Flatten;
  return l;
}

LayerSpec LayerSpec::maxpool2d(std::string id, std::size_t kernel, std::size_t stride) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::MaxPool2d;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"id", l.id}, {"kind", layer_kind_name(l.kind)}};
  switch (l.kind) {
    case LayerKind::Linear:
      j["in"] = l.in;
      j["out"] = l.out;
      j["bias"] = l.bias;
      break;
    case LayerKind::Conv2d:
      j["in"] = l.in;
      j["out"] = l.out;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      j["bias"] = l.bias;
      break;
    case LayerKind::BatchNorm2d:
      j["channels"] = l.out;
      j["eps"] = l.eps;
      j["momentum"] = l.momentum;
      break;
    case LayerKind::MaxPool2d:
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      break;
    default:
      break;
  }
}

void from_json(const nlohmann::json& j, LayerSpec& l) {
  l = LayerSpec{};
  l.id = j.at("id").get<std::string>();
  l.kind = parse_kind(j.at("kind").get<std::string>());
  switch (l.kind) {
    case LayerKind::Linear:
      l.in = j.at("in").get<std::size_t>();
      l.out = j.at("out").get<std::size_t>();
      l.bias = j.at("bias").get<bool>();
      break;
    case LayerKind::Conv2d:
      l.in = j.at("in").get<std::size_t>();
      l.out = j.at("out").get<std::size_t>();
      l.kernel = j.at("kernel").get<std::size_t>();
      l.stride = j.at("stride").get<std::size_t>();
      l.padding = j.at("padding").get<std::size_t>();
      l.bias = j.at("bias").get<bool>();
      break;
    case LayerKind::BatchNorm2d:
      l.in = l.out = j.at("channels").get<std::size_t>();
      l.eps = j.at("eps").get<double>();
      l.momentum = j.at("momentum").get<double>();
      break;
    case LayerKind::MaxPool2d:
      l.kernel = j.at("kernel").get<std::size_t>();
      l.stride = j.at("stride").get<std::size_t>();
      break;
    default:
      break;
  }
}

void to_json(nlohmann::json& j, const ExitBranch& e) {
  j = nlohmann::json{{"attach_after", e.attach_after},
                     {"layers", e.layers},
                     {"threshold", e.threshold},
                     {"loss_weight", e.loss_weight}};
}

void from_json(const nlohmann::json& j, ExitBranch& e) {
  e.attach_after = j.at("attach_after").get<std::string>();
  e.layers = j.at("layers").get<std::vector<LayerSpec>>();
  e.threshold = j.at("threshold").get<double>();
  e.loss_weight = j.at("loss_weight").get<double>();
}

Tensor ForwardInterceptor::weight(const std::string&, const Tensor& w, Mode) { return w; }

Tensor ForwardInterceptor::activation(const LayerSpec&, const Tensor& pre, Mode) { return relu(pre); }

Shape infer_layer_shape(const LayerSpec& l, const Shape& in) {
  auto fail = [&](const std::string& why) {
    throw DimensionError("layer '" + l.id + "' (" + layer_kind_name(l.kind) + "): " + why +
                         ", input " + shape_str(in));
  };
  switch (l.kind) {
    case LayerKind::Linear:
      if (in.size() != 1 || in[0] != l.in) fail("expects " + std::to_string(l.in) + " features");
      return {l.out};
    case LayerKind::Conv2d:
      if (in.size() != 3 || in[0] != l.in) fail("expects " + std::to_string(l.in) + " channels");
      return {l.out, conv_out_extent(in[1], l.kernel, l.stride, l.padding),
              conv_out_extent(in[2], l.kernel, l.stride, l.padding)};
    case LayerKind::BatchNorm2d:
      if (in.size() != 3 || in[0] != l.out) fail("expects " + std::to_string(l.out) + " channels");
      return in;
    case LayerKind::Relu:
      return in;
    case LayerKind::Flatten:
      return {shape_numel(in)};
    case LayerKind::MaxPool2d:
      if (in.size() != 3 || in[1] < l.kernel || in[2] < l.kernel || l.kernel == 0 || l.stride == 0) {
        fail("pooling window does not fit");
      }
      return {in[0], (in[1] - l.kernel) / l.stride + 1, (in[2] - l.kernel) / l.stride + 1};
  }
  return in;
}

Model::Model(std::string name, Shape sample_shape, std::vector<LayerSpec> layers, DType dtype)
    : name_(std::move(name)), sample_shape_(std::move(sample_shape)), dtype_(dtype) {
  if (layers.empty()) throw ContractError("model '" + name_ + "' has no layers");
  allocate(layers, sample_shape_);
  layers_ = std::move(layers);
}

void Model::allocate(const std::vector<LayerSpec>& layers, const Shape& input) {
  Shape s = input;
  for (const auto& l : layers) {
    if (l.id.empty()) throw ContractError("layer ids must be non-empty");
    s = infer_layer_shape(l, s);
    for (const auto& suffix : param_suffixes(l)) {
      std::string name = l.id + "." + suffix;
      if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
      Tensor t = suffix == "gamma" || suffix == "running_var"
                     ? Tensor::ones(param_shape(l, suffix), dtype_)
                     : Tensor::zeros(param_shape(l, suffix), dtype_);
      t.set_requires_grad(suffix != "running_mean" && suffix != "running_var");
      index_[name] = params_.size();
      params_.emplace_back(name, t);
    }
    if (l.kind == LayerKind::BatchNorm2d) bn_ready_[l.id] = false;
  }
}

void Model::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].first] = i;
}

const LayerSpec& Model::layer(const std::string& id) const { return layers_[layer_index(id)]; }

std::size_t Model::layer_index(const std::string& id) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].id == id) return i;
  }
  throw ContractError("model '" + name_ + "' has no layer '" + id + "'");
}

NamedTensors Model::trainable() const {
  NamedTensors out;
  for (const auto& p : params_) {
    if (p.second.requires_grad()) out.push_back(p);
  }
  return out;
}

bool Model::has_param(const std::string& name) const { return index_.count(name) != 0; }

Tensor& Model::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("model '" + name_ + "' has no parameter '" + name + "'");
  return params_[it->second].second;
}

const Tensor& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) {
    if (t.requires_grad()) n += t.numel();
  }
  return n;
}

std::vector<Shape> Model::layer_shapes() const {
  std::vector<Shape> shapes;
  Shape s = sample_shape_;
  for (const auto& l : layers_) {
    s = infer_layer_shape(l, s);
    shapes.push_back(s);
  }
  return shapes;
}

Tensor Model::apply_layer(const LayerSpec& l, const Tensor& x, Mode mode) {
  auto weight = [&]() -> Tensor {
    const Tensor& w = param(l.id + ".weight");
    return interceptor_ ? interceptor_->weight(l.id + ".weight", w, mode) : w;
  };
  switch (l.kind) {
    case LayerKind::Linear:
      return linear(x, weight(), l.bias ? param(l.id + ".bias") : Tensor());
    case LayerKind::Conv2d:
      return conv2d(x, weight(), l.bias ? param(l.id + ".bias") : Tensor(), l.stride, l.padding);
    case LayerKind::Relu:
      return interceptor_ ? interceptor_->activation(l, x, mode) : relu(x);
    case LayerKind::BatchNorm2d: {
      bool training = mode == Mode::Train;
      Tensor y = batch_norm2d(x, param(l.id + ".gamma"), param(l.id + ".beta"),
                              param(l.id + ".running_mean"), param(l.id + ".running_var"), l.eps,
                              l.momentum, training);
      if (training) bn_ready_[l.id] = true;
      return y;
    }
    case LayerKind::Flatten:
      return reshape(x, {x.size(0), x.numel() / x.size(0)});
    case LayerKind::MaxPool2d:
      return maxpool2d(x, l.kernel, l.stride);
  }
  return x;
}

void Model::check_input(const Tensor& x) const {
  const Shape& expect = sample_shape_;
  if (x.dim() != expect.size() + 1 || !std::equal(expect.begin(), expect.end(), x.shape().begin() + 1)) {
    throw DimensionError("model '" + name_ + "' expects input N x " + shape_str(expect) + ", got " +
                         shape_str(x.shape()));
  }
}

Tensor Model::forward(const Tensor& x, Mode mode) {
  if (!exits_.empty()) return forward_heads(x, mode).back();
  check_input(x);
  Tensor h = x;
  for (const auto& l : layers_) h = apply_layer(l, h, mode);
  return h;
}

Tensor Model::forward_observed(
    const Tensor& x, Mode mode,
    const std::function<void(const LayerSpec&, const Tensor& in, const Tensor& out)>& observer) {
  check_input(x);
  Tensor h = x;
  for (const auto& l : layers_) {
    Tensor out = apply_layer(l, h, mode);
    observer(l, h, out);
    h = out;
  }
  return h;
}

std::vector<Tensor> Model::forward_heads(const Tensor& x, Mode mode) {
  check_input(x);
  std::vector<Tensor> heads;
  Tensor h = x;
  for (const auto& l : layers_) {
    h = apply_layer(l, h, mode);
    for (const auto& e : exits_) {
      if (e.attach_after != l.id) continue;
      Tensor b = h;
      for (const auto& bl : e.layers) b = apply_layer(bl, b, mode);
      heads.push_back(b);
    }
  }
  heads.push_back(h);
  return heads;
}

void Model::set_interceptor(std::shared_ptr<ForwardInterceptor> interceptor) {
  interceptor_ = std::move(interceptor);
}

bool Model::bn_stats_ready(const std::string& id) const {
  auto it = bn_ready_.find(id);
  if (it == bn_ready_.end()) throw ContractError("model '" + name_ + "' has no batch-norm layer '" + id + "'");
  return it->second;
}

void Model::mark_bn_stats_ready(const std::string& id, bool ready) {
  auto it = bn_ready_.find(id);
  if (it == bn_ready_.end()) throw ContractError("model '" + name_ + "' has no batch-norm layer '" + id + "'");
  it->second = ready;
}

Model Model::clone() const {
  Model m;
  m.name_ = name_;
  m.sample_shape_ = sample_shape_;
  m.layers_ = layers_;
  m.exits_ = exits_;
  m.dtype_ = dtype_;
  m.bn_ready_ = bn_ready_;
  m.interceptor_ = interceptor_;
  for (const auto& [name, t] : params_) m.params_.emplace_back(name, t.clone());
  m.rebuild_index();
  return m;
}

void Model::add_exit(ExitBranch branch) {
  std::size_t at = layer_index(branch.attach_after);
  if (branch.layers.empty()) throw ContractError("exit branch has no layers");
  if (!(branch.threshold >= 0.0)) throw ContractError("exit threshold must be >= 0");
  if (!(branch.loss_weight >= 0.0)) throw ContractError("exit loss weight must be >= 0");
  for (const auto& l : branch.layers) {
    for (const auto& t : layers_) {
      if (t.id == l.id) throw ContractError("exit layer id '" + l.id + "' collides with the trunk");
    }
    for (const auto& e : exits_)
      for (const auto& o : e.layers) {
        if (o.id == l.id) throw ContractError("exit layer id '" + l.id + "' is already in use");
      }
  }
  Shape s = layer_shapes()[at];
  for (const auto& l : branch.layers) s = infer_layer_shape(l, s);
  Shape head = layer_shapes().back();
  if (s != head) {
    throw DimensionError("exit branch produces " + shape_str(s) + " but the final head produces " +
                         shape_str(head));
  }
  allocate(branch.layers, layer_shapes()[at]);
  auto pos = std::find_if(exits_.begin(), exits_.end(),
                          [&](const ExitBranch& e) { return layer_index(e.attach_after) > at; });
  exits_.insert(pos, std::move(branch));
}

nlohmann::json Model::arch_json() const {
  nlohmann::json j;
  j["name"] = name_;
  j["dtype"] = dtype_name(dtype_);
  j["sample_shape"] = sample_shape_;
  j["layers"] = layers_;
  j["exits"] = exits_;
  nlohmann::json ready = nlohmann::json::object();
  for (const auto& [id, r] : bn_ready_) ready[id] = r;
  j["bn_stats_ready"] = ready;
  return j;
}

Model Model::from_arch_json(const nlohmann::json& j) {
  std::string dt = j.at("dtype").get<std::string>();
  if (dt != "f32" && dt != "f64") throw ContractError("unknown model dtype '" + dt + "'");
  Model m(j.at("name").get<std::string>(), j.at("sample_shape").get<Shape>(),
          j.at("layers").get<std::vector<LayerSpec>>(), dt == "f32" ? DType::F32 : DType::F64);
  for (const auto& e : j.at("exits").get<std::vector<ExitBranch>>()) m.add_exit(e);
  for (const auto& [id, r] : j.at("bn_stats_ready").items()) m.mark_bn_stats_ready(id, r.get<bool>());
  return m;
}

void init_kaiming_uniform(Model& model, std::uint64_t seed) {
  auto init_layer = [&](const LayerSpec& l) {
    if (!l.parametric()) return;
    std::size_t fan_in = l.kind == LayerKind::Linear ? l.in : l.in * l.kernel * l.kernel;
    double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
    double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (const auto& suffix : param_suffixes(l)) {
      std::string name = l.id + "." + suffix;
      Rng rng = Rng::derive(seed, "init/" + name);
      double bound = suffix == "weight" ? wb : bb;
      Tensor& t = model.param(name);
      for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
      t.round_to_dtype();
    }
  };
  for (const auto& l : model.layers()) init_layer(l);
  for (const auto& e : model.exits())
    for (const auto& l : e.layers) init_layer(l);
}

Model build_model(const std::string& arch_id, std::uint64_t seed, DType dtype) {
  Model m;
  if (arch_id == "mlp-blobs") {
    m = Model("mlp-blobs", {2},
              {LayerSpec::linear("fc1", 2, 32), LayerSpec::relu("relu1"),
               LayerSpec::linear("fc2", 32, 32), LayerSpec::relu("relu2"),
               LayerSpec::linear("fc3", 32, 4)},
              dtype);
  } else if (arch_id == "cnn-tiny") {
    m = Model("cnn-tiny", {1, 28, 28},
              {LayerSpec::conv2d("conv1", 1, 8, 3), LayerSpec::relu("relu1"),
               LayerSpec::maxpool2d("pool1", 2, 2), LayerSpec::conv2d("conv2", 8, 16, 3),
               LayerSpec::relu("relu2"), LayerSpec::maxpool2d("pool2", 2, 2),
               LayerSpec::flatten("flatten"), LayerSpec::linear("fc", 16 * 5 * 5, 10)},
              dtype);
  } else if (arch_id == "cnn-tiny-bn") {
    m = Model("cnn-tiny-bn", {1, 28, 28},
              {LayerSpec::conv2d("conv1", 1, 8, 3), LayerSpec::batchnorm2d("bn1", 8),
               LayerSpec::relu("relu1"), LayerSpec::maxpool2d("pool1", 2, 2),
               LayerSpec::conv2d("conv2", 8, 16, 3), LayerSpec::batchnorm2d("bn2", 16),
               LayerSpec::relu("relu2"), LayerSpec::maxpool2d("pool2", 2, 2),
               LayerSpec::flatten("flatten"), LayerSpec::linear("fc", 16 * 5 * 5, 10)},
              dtype);
  } else {
    throw ContractError("unknown architecture '" + arch_id + "'");
  }
  init_kaiming_uniform(m, seed);
  return m;
}

}  // namespace nncomp
