// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nncomp {

/// Element precision of a tensor. F32 tensors only ever hold values that are
/// exactly representable as `float`; arithmetic is carried out in double and
/// rounded once when the result is written.
enum class DType { F32, F64 };

const char* dtype_name(DType dt) noexcept;
DType promote(DType a, DType b) noexcept;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);
std::vector<std::size_t> shape_strides(const Shape& shape);

class Tensor;

/// Gradient of the op output is handed in; one gradient buffer per input is
/// returned (an empty vector means "no contribution").
using BackwardFn =
    std::function<std::vector<std::vector<double>>(std::span<const double>)>;

struct TensorImpl;

/// One recorded operation of the reverse-mode tape.
struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until the first backward reaches it
  std::shared_ptr<TapeNode> node;
};

/// Dense row-major tensor. Copies share storage (handle semantics); use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, DType dtype = DType::F32);
  Tensor(Shape shape, std::vector<double> values, DType dtype = DType::F32);

  static Tensor zeros(Shape shape, DType dtype = DType::F32);
  static Tensor ones(Shape shape, DType dtype = DType::F32);
  static Tensor full(Shape shape, double value, DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);
  static Tensor from(std::initializer_list<double> values,
                     DType dtype = DType::F32);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  std::span<const double> data() const;
  /// Mutable element access. Reserved for in-place hooks (mask application,
  /// optimizer updates, initialisation); values are re-rounded to the
  /// tensor's precision by the caller through round_to_dtype().
  std::span<double> mutable_data();
  void round_to_dtype();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad_data() const;
  /// Allocates a zero gradient when none is held yet.
  std::span<double> mutable_grad();
  Tensor grad() const;
  void zero_grad();

  /// Deep copy without tape history.
  Tensor clone() const;
  /// Shares storage, drops tape history.
  Tensor detach() const;
  Tensor to(DType dtype) const;

  /// Identity of the underlying storage.
  const TensorImpl* id() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const noexcept { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Builds the output of an op and records it on the tape when any input
/// requires a gradient and gradient recording is enabled.
Tensor record_op(const char* op, Shape shape, std::vector<double> values,
                 DType dtype, std::vector<Tensor> inputs, BackwardFn backward);

/// Runs reverse-mode differentiation from a scalar loss. Gradients accumulate
/// into every reachable leaf that requires them.
void backward(const Tensor& loss);

/// Whether new ops are recorded on the tape (thread-local).
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Deterministic mode runs every kernel sequentially. Parallel mode splits
/// batch-level loops over worker threads; reductions inside one output
/// element keep their order, so results stay within rounding tolerance.
void set_deterministic(bool on) noexcept;
bool deterministic() noexcept;

}  // namespace nncomp
