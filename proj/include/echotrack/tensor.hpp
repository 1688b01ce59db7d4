#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
//
// The scalar type is fixed per build: the production library is compiled with
// `real = float`, the gradient-check library with `real = double`. Each build
// lives in its own inline namespace so the two can never be mixed in a link.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#if defined(ECHOTRACK_REAL_F64)
#define ECHOTRACK_ABI f64
#else
#define ECHOTRACK_ABI f32
#endif

namespace echotrack {
inline namespace ECHOTRACK_ABI {

#if defined(ECHOTRACK_REAL_F64)
using real = double;
#else
using real = float;
#endif

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };
inline constexpr DType kRealDType = sizeof(real) == 8 ? DType::f64 : DType::f32;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised whenever operand shapes are incompatible. The message names every
/// offending shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the tape: non-scalar loss, empty or already-consumed tape.
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Storage is 64-byte aligned so vectorized kernels always split their work the
// same way; with plain heap blocks the last bits of a result could depend on
// where the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<real, AlignedAllocator<real>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // allocated lazily, same length as data
  bool requires_grad = false;

  Buffer& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), real(0));
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data, bool requires_grad = false);
  template <typename Alloc>
    requires(!std::is_same_v<Alloc, AlignedAllocator<real>>)
  Tensor(Shape shape, const std::vector<real, Alloc>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);
  static Tensor eye(std::size_t n);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }
  DType dtype() const { return kRealDType; }

  std::span<const real> data() const;
  // Direct write access. Only meant for constructing inputs and for the
  // optimizer updating leaf parameters between steps.
  std::span<real> mutable_data();

  real item() const;
  real at(std::initializer_list<std::size_t> index) const;
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  /// Accumulated gradient as a fresh tensor (zeros when none was received).
  Tensor grad() const;
  std::span<const real> grad_data() const;
  void zero_grad();

  /// Copy of the values with no history.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Constructing a Tape makes it
/// the active tape of the calling thread until it is destroyed; operations on
/// tensors that require gradients append a node to the active tape. Nodes are
/// appended after their inputs exist, so reverse recording order is a valid
/// reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<TensorImpl> output, BackwardFn backward);

  /// Propagates d(loss)/d(x) into every tensor that requires gradients.
  /// A tape can be replayed once; record a new one for the next pass.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
