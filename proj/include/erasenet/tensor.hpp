#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace erasenet {

/// (batch, channels, rows, cols). Every dimension is at least 1.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr std::size_t sample() const { return c * h * w; }
  constexpr bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when backward reaches a graph whose contexts were already consumed.
class GraphConsumedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

namespace detail {

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

/// One value in the recorded graph. Non-leaf nodes are the op records: they
/// keep their inputs and a backward closure holding the saved forward context.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::uint64_t seq = next_sequence();
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline bool& grad_recording() {
  thread_local bool enabled = true;
  return enabled;
}

/// Records the branch taken by every non-differentiable decision (activation
/// sign, pooling argmax) while active. Two evaluations with equal signatures
/// lie on the same smooth piece of the function.
struct KinkMonitor {
  bool active = false;
  std::uint64_t signature = 0xcbf29ce484222325ULL;

  void reset() { signature = 0xcbf29ce484222325ULL; }
  void fold(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      signature ^= (v >> (8 * i)) & 0xff;
      signature *= 0x100000001b3ULL;
    }
  }
};

inline KinkMonitor& kink_monitor() {
  thread_local KinkMonitor m;
  return m;
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording()) { detail::grad_recording() = false; }
  ~NoGradGuard() { detail::grad_recording() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense 4-D tensor with an optional gradient slot.
///
/// Copies share the underlying node: a Tensor is a handle to one recorded
/// value. Values of recorded (non-leaf) tensors are never mutated; leaf
/// tensors (parameters, inputs) may be rewritten between graphs through
/// mutable_data().
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;
  using BackwardFn = std::function<void(Node&)>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (!shape.valid()) throw ShapeError("Tensor: every dimension must be >= 1, got " + shape.str());
    if (values.size() != shape.size()) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape.str());
    }
    node_ = std::make_shared<Node>();
    node_->shape = shape;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    if (!shape.valid()) throw ShapeError("Tensor: every dimension must be >= 1, got " + shape.str());
    return Tensor(shape, std::vector<T>(shape.size(), v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
  }

  /// Result of an op. Records the op only when an input requires grad.
  static Tensor make_result(Shape shape, std::vector<T> values, std::string op,
                            const std::vector<Tensor>& inputs, BackwardFn backward) {
    Tensor out(shape, std::move(values), false);
    const bool track = detail::grad_recording() && std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
      out.node_->requires_grad = true;
      out.node_->leaf = false;
      out.node_->op = std::move(op);
      out.node_->inputs.reserve(inputs.size());
      for (const auto& t : inputs) out.node_->inputs.push_back(t.node_);
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return checked().shape; }
  std::size_t size() const { return checked().value.size(); }
  std::span<const T> data() const { return checked().value; }

  std::span<T> mutable_data() {
    if (!checked().leaf) {
      throw std::logic_error("Tensor: in-place mutation of a recorded op result is not allowed");
    }
    return node_->value;
  }

  T item() const {
    if (size() != 1) throw ShapeError("Tensor::item on shape " + shape().str());
    return node_->value[0];
  }

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = shape();
    return node_->value[((n * s.c + c) * s.h + h) * s.w + w];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return checked().leaf; }
  const std::string& op_name() const { return checked().op; }

  void set_requires_grad(bool on) {
    if (!checked().leaf) throw std::logic_error("Tensor: requires_grad is fixed on op results");
    node_->requires_grad = on;
  }

  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw std::logic_error("Tensor: no gradient populated");
    return node_->grad;
  }
  std::span<T> mutable_grad() { return checked().grad_buffer(); }
  void zero_grad() {
    if (node_) {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  /// Copy of the values with no graph attached.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), checked().value, requires_grad);
  }

  /// Reverse-mode sweep from a (1,1,1,1) loss. Gradients accumulate into
  /// leaves; contexts of every traversed op are released afterwards.
  void backward() const {
    const Node& root = checked();
    if (root.shape != Shape{}) throw ShapeError("backward: loss must be 1x1x1x1, got " + root.shape.str());
    if (root.consumed) throw GraphConsumedError("backward: graph already consumed");
    if (!root.requires_grad) throw std::logic_error("backward: loss does not require grad");

    // owning handles: releasing an op's inputs below may drop the last
    // other reference to a node still waiting in the sweep
    std::vector<std::shared_ptr<Node>> order;
    {
      std::vector<std::shared_ptr<Node>> stack{node_};
      std::unordered_set<const Node*> seen;
      auto visited = [&](const Node* p) { return seen.contains(p); };
      while (!stack.empty()) {
        std::shared_ptr<Node> cur = stack.back();
        stack.pop_back();
        if (visited(cur.get())) continue;
        seen.insert(cur.get());
        if (cur->consumed) throw GraphConsumedError("backward: graph already consumed at op '" + cur->op + "'");
        order.push_back(cur);
        for (auto& in : cur->inputs) {
          if (in->requires_grad && !visited(in.get())) stack.push_back(in);
        }
      }
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

    auto seed = node_->grad_buffer();
    seed[0] += T(1);
    for (const auto& n : order) {
      if (n->leaf) continue;
      if (n->grad.size() == n->value.size() && n->backward_fn) n->backward_fn(*n);
      n->backward_fn = nullptr;
      n->inputs.clear();
      n->consumed = true;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

  Node& node() const { return checked(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  Node& checked() const {
    if (!node_) throw std::logic_error("Tensor: use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<Node> node_;
};

/// Gradient buffer of input i of an op record, or an empty span when that
/// input does not require grad.
template <class T>
std::span<T> input_grad(detail::Node<T>& self, std::size_t i) {
  auto& in = *self.inputs.at(i);
  if (!in.requires_grad) return {};
  return in.grad_buffer();
}

/// True when every value is finite.
template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace erasenet
