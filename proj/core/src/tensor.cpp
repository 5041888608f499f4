// SPDX-License-Identifier: Apache-2.0
#include "nncomp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "nncomp/error.hpp"

namespace nncomp {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<bool> g_deterministic{true};

void round_values(std::span<double> v, DType dt) {
  if (dt != DType::F32) return;
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

const char* dtype_name(DType dt) noexcept {
  return dt == DType::F32 ? "f32" : "f64";
}

DType promote(DType a, DType b) noexcept {
  return (a == DType::F64 || b == DType::F64) ? DType::F64 : DType::F32;
}

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> shape_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, DType dtype)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
  impl_->dtype = dtype;
}

Tensor::Tensor(Shape shape, std::vector<double> values, DType dtype)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  round_values(values, dtype);
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->dtype = dtype;
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  std::vector<double> v(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(v), dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return Tensor(Shape{}, {value}, dtype); }

Tensor Tensor::from(std::initializer_list<double> values, DType dtype) {
  return Tensor(Shape{values.size()}, std::vector<double>(values), dtype);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

DType Tensor::dtype() const { return impl_->dtype; }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

void Tensor::round_to_dtype() { round_values(impl_->data, impl_->dtype); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() needs a single-element tensor, shape is " + shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != impl_->shape.size()) {
    throw DimensionError("index rank does not match shape " + shape_str(impl_->shape));
  }
  auto strides = shape_strides(impl_->shape);
  std::size_t off = 0, k = 0;
  for (auto i : index) {
    if (i >= impl_->shape[k]) throw DimensionError("index out of range for shape " + shape_str(impl_->shape));
    off += i * strides[k++];
  }
  return impl_->data[off];
}

std::vector<double> Tensor::to_vector() const { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf() && !flag) {
    throw ContractError("cannot clear requires_grad on a non-leaf tensor; use detach()");
  }
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad_data() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor holds no gradient");
  return Tensor(impl_->shape, impl_->grad, impl_->dtype);
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data, impl_->dtype);
  t.impl_->requires_grad = impl_->requires_grad && is_leaf();
  return t;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType dtype) const { return Tensor(impl_->shape, impl_->data, dtype); }

Tensor record_op(const char* op, Shape shape, std::vector<double> values, DType dtype,
                 std::vector<Tensor> inputs, BackwardFn backward_fn) {
  Tensor out(std::move(shape), std::move(values), dtype);
  if (!g_grad_enabled) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<TapeNode>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward_fn);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss is not connected to any tensor that requires a gradient");
  }

  // Reverse topological order by iterative post-order DFS.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  std::unordered_map<TensorImpl*, std::vector<double>> pending;
  pending[loss.impl().get()] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    auto found = pending.find(t);
    if (found == pending.end()) continue;
    std::vector<double> g = std::move(found->second);
    pending.erase(found);
    if (!t->node) {
      if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
      round_values(t->grad, t->dtype);
      continue;
    }
    auto input_grads = t->node->backward(g);
    for (std::size_t k = 0; k < t->node->inputs.size() && k < input_grads.size(); ++k) {
      TensorImpl* in = t->node->inputs[k].get();
      if (!in || !in->requires_grad || input_grads[k].empty()) continue;
      auto& acc = pending[in];
      if (acc.empty()) {
        acc = std::move(input_grads[k]);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += input_grads[k][i];
      }
    }
  }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void set_deterministic(bool on) noexcept { g_deterministic = on; }

bool deterministic() noexcept { return g_deterministic; }

}  // namespace nncomp
