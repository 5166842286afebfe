// Dense row-major tensors with a reverse-mode recording tape.
//
// A Tensor is a shared handle onto a Node holding shape, values and an
// optional gradient buffer. Operations in ops.hpp record a backward rule on
// the thread's active Tape whenever one of their inputs requires a gradient.
// Layout is row-major everywhere; image-like tensors are (H, W, C).
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace w2w {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool grad_live = false;  // reached by the current backward pass

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<Node<T>>()) {}

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  // A trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // In-place access for optimizers and loaders; never used by recorded ops.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), size()}; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const {
    Tensor t(shape(), node_->data);
    t.set_requires_grad(requires_grad());
    return t;
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<T>& grad_out)>;

  struct Entry {
    std::string_view name;
    std::shared_ptr<Node<T>> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void record(std::string_view name, std::shared_ptr<Node<T>> output, BackwardFn fn) {
    entries_.push_back({name, std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Replays recorded rules in reverse order. Intermediate gradients are reset
  // on every call; leaf gradients only ever accumulate.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    }
    for (auto& e : entries_) {
      e.output->grad.assign(e.output->data.size(), T(0));
      e.output->grad_live = false;
    }
    auto& root = *loss.node();
    if (root.leaf) {
      root.grad_buffer()[0] += T(1);
      return;
    }
    root.grad[0] = T(1);
    root.grad_live = true;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->grad_live) continue;
      if (!fault_op().empty() && it->name == fault_op()) {
        for (auto& g : it->output->grad) g *= T(1.25);
      }
      it->backward(it->output->grad);
    }
  }

  // Test hook: scales the incoming gradient of every op with this name.
  static std::string& fault_op() {
    static std::string name;
    return name;
  }

 private:
  std::vector<Entry> entries_;
};

// Makes a tape the recording target for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording for the current thread while in scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

// Marks `out` as produced by an op and records its rule when a tape is active
// and any input requires a gradient.
template <typename T>
Tensor<T> record(std::string_view name, Tensor<T> out,
                 std::initializer_list<const Tensor<T>*> inputs,
                 typename Tape<T>::BackwardFn fn) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr || !any_requires_grad(inputs)) return out;
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  tape->record(name, out.node(), std::move(fn));
  return out;
}

// Gradient sink for an input: null when the input does not take gradients.
template <typename T>
T* sink(const std::shared_ptr<Node<T>>& node) {
  if (!node->requires_grad) return nullptr;
  node->grad_live = true;
  return node->grad_buffer();
}

}  // namespace detail

}  // namespace w2w
