#include "semshift/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace semshift {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <std::floating_point T>
detail::Node<T>& Tensor<T>::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

template <std::floating_point T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T{0}, requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  return adopt(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::adopt(Shape shape, Buffer<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <std::floating_point T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{}, std::vector<T>{value}, requires_grad);
}

template <std::floating_point T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  const auto& s = node().shape;
  if (i >= s.size()) {
    throw ShapeError("dimension " + std::to_string(i) + " out of range for shape " + shape_to_string(s));
  }
  return s[i];
}

template <std::floating_point T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return node().values[0];
}

template <std::floating_point T>
void Tensor<T>::set_requires_grad(bool on) {
  auto& n = node();
  if (!n.is_leaf()) throw std::logic_error("requires_grad can only be changed on leaves");
  n.requires_grad = on;
}

template <std::floating_point T>
void Tensor<T>::zero_grad() {
  auto& n = node();
  if (n.requires_grad) {
    n.grad.assign(n.values.size(), T{0});
  } else {
    n.grad.clear();
  }
}

template <std::floating_point T>
Tensor<T> Tensor<T>::detach() const {
  return adopt(shape(), node().values, false);
}

template <std::floating_point T>
FreezeGuard<T>::FreezeGuard(std::vector<Tensor<T>> params) : params_(std::move(params)) {
  previous_.reserve(params_.size());
  for (auto& p : params_) {
    previous_.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
}

template <std::floating_point T>
FreezeGuard<T>::~FreezeGuard() {
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(previous_[i]);
}

template <std::floating_point T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{root.node_ptr().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->is_leaf()) {
      if (n->requires_grad) tape.leaves_.push_back(n);
      continue;
    }
    tape.ops_.push_back(n);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (n->input_needs_grad[i]) stack.push_back(n->inputs[i].get());
    }
  }
  std::sort(tape.ops_.begin(), tape.ops_.end(),
            [](const auto* a, const auto* b) { return a->sequence > b->sequence; });
  return tape;
}

template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  const auto tape = Tape<T>::record(loss);
  for (auto* leaf : tape.leaves()) {
    if (leaf->grad.empty()) leaf->grad.assign(leaf->values.size(), T{0});
  }
  if (tape.operations().empty()) {
    // Loss is itself a leaf.
    auto* root = loss.node_ptr().get();
    if (root->requires_grad) root->grad[0] += T{1};
    return;
  }

  std::unordered_map<const detail::Node<T>*, Buffer<T>> grads;
  grads[loss.node_ptr().get()] = Buffer<T>{T{1}};
  detail::GradOutputs<T> in_grads;
  for (auto* op : tape.operations()) {
    auto it = grads.find(op);
    if (it == grads.end()) continue;  // not on a path from the root with nonzero seed
    const Buffer<T> out_grad = std::move(it->second);
    grads.erase(it);

    in_grads.assign(op->inputs.size(), std::span<T>{});
    for (std::size_t i = 0; i < op->inputs.size(); ++i) {
      if (!op->input_needs_grad[i]) continue;
      auto* in = op->inputs[i].get();
      if (!in->is_leaf()) {
        auto& buf = grads[in];
        if (buf.empty()) buf.assign(in->values.size(), T{0});
        in_grads[i] = buf;
      } else if (in->requires_grad) {
        in_grads[i] = in->grad;
      }
    }
    op->backward(out_grad, in_grads);
  }
}

template <std::floating_point T>
Tensor<T> make_result(std::string_view op_name, Shape shape, Buffer<T> values,
                      std::vector<Tensor<T>> inputs, detail::BackwardFn<T> backward_fn) {
  auto result = Tensor<T>::adopt(std::move(shape), std::move(values), false);
  if (!grad_mode_enabled()) return result;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.node_ptr()->needs_grad(); });
  if (!any) return result;
  auto& node = *result.node_ptr();
  node.op_name = op_name;
  node.sequence = detail::next_sequence();
  node.backward = std::move(backward_fn);
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    node.input_needs_grad.push_back(in.node_ptr()->needs_grad());
    node.inputs.push_back(in.node_ptr());
  }
  return result;
}

#define SEMSHIFT_INSTANTIATE(T)                                                                 \
  template class Tensor<T>;                                                                     \
  template class FreezeGuard<T>;                                                                \
  template class Tape<T>;                                                                       \
  template void backward<T>(const Tensor<T>&);                                                  \
  template Tensor<T> make_result<T>(std::string_view, Shape, Buffer<T>, std::vector<Tensor<T>>, \
                                    detail::BackwardFn<T>);

SEMSHIFT_INSTANTIATE(float)
SEMSHIFT_INSTANTIATE(double)

#undef SEMSHIFT_INSTANTIATE

}  // namespace semshift
