// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nncomp/optim.hpp"
#include "nncomp/tensor.hpp"

namespace nncomp {

enum class LayerKind { Linear, Conv2d, Relu, BatchNorm2d, Flatten, MaxPool2d };

const char* layer_kind_name(LayerKind kind) noexcept;

/// Hyperparameters of one layer. `in`/`out` are features (linear) or channels
/// (conv, batch norm uses `out`).
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::Relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
  double eps = 1e-5;
  double momentum = 0.1;

  bool parametric() const noexcept { return kind == LayerKind::Linear || kind == LayerKind::Conv2d; }
  bool operator==(const LayerSpec&) const = default;

  static LayerSpec linear(std::string id, std::size_t in, std::size_t out, bool bias = true);
  static LayerSpec conv2d(std::string id, std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0, bool bias = true);
  static LayerSpec relu(std::string id);
  static LayerSpec batchnorm2d(std::string id, std::size_t channels, double eps = 1e-5,
                               double momentum = 0.1);
  static LayerSpec flatten(std::string id);
  static LayerSpec maxpool2d(std::string id, std::size_t kernel, std::size_t stride);
};

void to_json(nlohmann::json& j, const LayerSpec& l);
void from_json(const nlohmann::json& j, LayerSpec& l);

/// Auxiliary classifier head attached after a layer of the trunk. Inference
/// stops at the first exit whose softmax entropy is below `threshold`.
struct ExitBranch {
  std::string attach_after;
  std::vector<LayerSpec> layers;
  double threshold = 0.0;
  double loss_weight = 1.0;

  bool operator==(const ExitBranch&) const = default;
};

void to_json(nlohmann::json& j, const ExitBranch& e);
void from_json(const nlohmann::json& j, ExitBranch& e);

enum class Mode { Train, Eval };

/// Hook points used by quantization-aware training. The defaults leave the
/// forward pass untouched.
class ForwardInterceptor {
 public:
  virtual ~ForwardInterceptor() = default;
  /// Called with each linear/conv weight before use.
  virtual Tensor weight(const std::string& param_name, const Tensor& w, Mode mode);
  /// Produces the activation of a ReLU site from its pre-activation.
  virtual Tensor activation(const LayerSpec& site, const Tensor& pre, Mode mode);
  /// Extra trainable tensors owned by the interceptor (e.g. clipping levels).
  virtual NamedTensors parameters() const { return {}; }
};

/// Sequential network with stable parameter naming ("<layer>.weight",
/// "<layer>.bias", batch norm "<layer>.gamma|beta|running_mean|running_var").
class Model {
 public:
  Model() = default;
  /// Validates shape compatibility and allocates zero-filled parameters.
  Model(std::string name, Shape sample_shape, std::vector<LayerSpec> layers,
        DType dtype = DType::F32);

  const std::string& name() const noexcept { return name_; }
  const Shape& sample_shape() const noexcept { return sample_shape_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<ExitBranch>& exits() const noexcept { return exits_; }
  DType dtype() const noexcept { return dtype_; }

  const LayerSpec& layer(const std::string& id) const;
  std::size_t layer_index(const std::string& id) const;

  /// Every tensor in enumeration order (trunk layers, then exit branches).
  const NamedTensors& parameters() const noexcept { return params_; }
  /// Tensors updated by the optimizer (excludes batch-norm running stats).
  NamedTensors trainable() const;
  bool has_param(const std::string& name) const;
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;

  /// Per-sample output shape of every trunk layer.
  std::vector<Shape> layer_shapes() const;

  Tensor forward(const Tensor& x, Mode mode);
  /// Forward pass that reports every trunk layer's input and output.
  Tensor forward_observed(
      const Tensor& x, Mode mode,
      const std::function<void(const LayerSpec&, const Tensor& in, const Tensor& out)>& observer);
  /// Runs a single layer (trunk or exit branch) on `x`.
  Tensor apply_layer(const LayerSpec& layer, const Tensor& x, Mode mode);
  /// Logits of every exit branch in order, then the final head.
  std::vector<Tensor> forward_heads(const Tensor& x, Mode mode);

  void set_interceptor(std::shared_ptr<ForwardInterceptor> interceptor);
  const std::shared_ptr<ForwardInterceptor>& interceptor() const noexcept { return interceptor_; }

  /// Whether batch-norm layer `id` holds running statistics from training or
  /// an explicit assignment.
  bool bn_stats_ready(const std::string& id) const;
  void mark_bn_stats_ready(const std::string& id, bool ready = true);

  /// Independent copy of structure and parameters; the interceptor is shared.
  Model clone() const;

  void add_exit(ExitBranch branch);

  nlohmann::json arch_json() const;
  static Model from_arch_json(const nlohmann::json& j);

 private:
  void check_input(const Tensor& x) const;
  void allocate(const std::vector<LayerSpec>& layers, const Shape& input);
  void rebuild_index();

  std::string name_;
  Shape sample_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<ExitBranch> exits_;
  DType dtype_ = DType::F32;
  NamedTensors params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, bool> bn_ready_;
  std::shared_ptr<ForwardInterceptor> interceptor_;
};

/// Per-sample output shape of `layer` for a per-sample input shape.
Shape infer_layer_shape(const LayerSpec& layer, const Shape& in);

/// Known architectures: "mlp-blobs" (2-32-32-4 ReLU MLP), "cnn-tiny"
/// (two conv/relu/maxpool stages and a linear head on 1x28x28 input) and
/// "cnn-tiny-bn" (cnn-tiny with batch norm after each conv).
Model build_model(const std::string& arch_id, std::uint64_t seed, DType dtype = DType::F32);

/// Kaiming-uniform weights (bound sqrt(6/fan_in)) and uniform biases
/// (bound 1/sqrt(fan_in)), one PRNG stream per parameter.
void init_kaiming_uniform(Model& model, std::uint64_t seed);

}  // namespace nncomp
