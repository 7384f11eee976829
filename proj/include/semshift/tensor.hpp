#pragma once

#include <atomic>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace semshift {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Thrown when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Allocates on 64-byte boundaries. Vectorized kernels choose their
/// reduction split from pointer alignment, so aligned storage keeps float
/// results independent of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <std::floating_point T>
struct Node;

/// Accumulation buffers handed to a backward closure, one per input.
/// An empty span means that input does not need a gradient.
template <std::floating_point T>
using GradOutputs = std::vector<std::span<T>>;

template <std::floating_point T>
using BackwardFn = std::function<void(std::span<const T> out_grad, GradOutputs<T>& in_grads)>;

template <std::floating_point T>
struct Node {
  Shape shape;
  Buffer<T> values;
  Buffer<T> grad;  // empty when absent
  bool requires_grad = false;

  // Recorded operations only.
  std::string_view op_name;
  std::uint64_t sequence = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Whether each input needed a gradient when the op was recorded. Edges
  // without it are never traversed, so frozen leaves stay constant.
  std::vector<bool> input_needs_grad;
  BackwardFn<T> backward;

  bool is_leaf() const { return !backward; }
  bool needs_grad() const { return requires_grad || !is_leaf(); }
};

std::uint64_t next_sequence();

}  // namespace detail

/// Reverse-mode tensor handle. Copies share the same underlying storage.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  /// Like from, taking ownership of aligned storage without a copy.
  static Tensor adopt(Shape shape, Buffer<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().values.size(); }

  std::span<const T> values() const { return node().values; }
  /// Direct write access for initialization and optimizer updates.
  std::span<T> mutable_values() { return node().values; }
  T item() const;

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return node().is_leaf(); }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().grad; }
  /// Resets the grad to zeros, allocating it for requires_grad leaves.
  void zero_grad();
  /// Drops the grad buffer entirely.
  void clear_grad() { node().grad.clear(); }

  /// A new leaf sharing no graph history; values are copied.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  std::string_view op_name() const { return node().op_name; }

  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node<T>> node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  detail::Node<T>& node() const;

  std::shared_ptr<detail::Node<T>> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Temporarily clears requires_grad on a set of leaves so they act as
/// constants in every op recorded inside the guarded region, including
/// during later backward passes.
template <std::floating_point T>
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Tensor<T>> params);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor<T>> params_;
  std::vector<bool> previous_;
};

/// Reverse-execution-order record of the operations reachable from a root.
template <std::floating_point T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  /// Recorded operations, latest first.
  const std::vector<detail::Node<T>*>& operations() const { return ops_; }
  /// Leaves reachable from the root that require a gradient.
  const std::vector<detail::Node<T>*>& leaves() const { return leaves_; }

 private:
  std::vector<detail::Node<T>*> ops_;
  std::vector<detail::Node<T>*> leaves_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf with requires_grad.
template <std::floating_point T>
void backward(const Tensor<T>& loss);

/// Builds a recorded node when grad mode is on and any input needs a gradient,
/// otherwise returns a plain constant.
template <std::floating_point T>
Tensor<T> make_result(std::string_view op_name, Shape shape, Buffer<T> values,
                      std::vector<Tensor<T>> inputs, detail::BackwardFn<T> backward_fn);

}  // namespace semshift
