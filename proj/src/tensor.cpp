#include "echotrack/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace echotrack {
inline namespace ECHOTRACK_ABI {
namespace {

thread_local Tape* t_active_tape = nullptr;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (echotrack::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(echotrack::numel(shape)) + " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = echotrack::numel(shape);
  return Tensor(std::move(shape), Buffer(n, real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  const auto n = echotrack::numel(shape);
  return Tensor(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return Tensor(Shape{}, Buffer{value}, requires_grad);
}

Tensor Tensor::eye(std::size_t n) {
  auto t = zeros({n, n});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = real(1);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty{0};
  return impl_ ? impl_->shape : kEmpty;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return shape()[axis];
}

std::span<const real> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<real> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on shape " + to_string(shape()));
  return impl_->data[0];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw ShapeError("tensor: index of rank " + std::to_string(index.size()) + " into shape " +
                     to_string(s));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("tensor: index out of range for shape " + to_string(s));
    off = off * s[axis] + i;
    ++axis;
  }
  return off;
}

real Tensor::at(std::initializer_list<std::size_t> index) const { return impl_->data[offset(index)]; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_) impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  if (!has_grad()) return zeros(shape());
  return Tensor(shape(), impl_->grad);
}

std::span<const real> Tensor::grad_data() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data);
}

Tape::Tape() : previous_(t_active_tape) { t_active_tape = this; }

Tape::~Tape() {
  if (t_active_tape == this) t_active_tape = previous_;
}

Tape* Tape::active() { return t_active_tape; }

void Tape::record(std::shared_ptr<TensorImpl> output, BackwardFn backward) {
  if (consumed_) throw AutogradError("tape: recording onto a consumed tape");
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw AutogradError("tape: backward called twice on the same recording");
  if (nodes_.empty()) throw AutogradError("tape: backward on an empty tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw AutogradError("tape: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw AutogradError("tape: loss does not depend on any parameter");
  consumed_ = true;
  loss.impl()->grad_buffer()[0] += real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  // Drop the closures so intermediate buffers are released.
  nodes_.clear();
}

NoGradGuard::NoGradGuard() : saved_(t_active_tape) { t_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { t_active_tape = saved_; }

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
