#pragma once

// Dense tensors with a reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node holding the shape, the
// values and (when requires_grad is set) a gradient buffer of the same
// shape. Values are immutable once an op has produced them; only leaves
// (parameters, inputs) expose mutable storage.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace srclab {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Violated precondition (shape mismatch, bad index, invalid config).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf or a division by zero reached a value or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Leaves only; an op output is immutable.
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Empty span until a backward pass has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad();

  /// Deep copy, detached from any tape.
  Tensor clone(bool requires_grad) const;
  Tensor clone() const { return clone(requires_grad()); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of primitive applications. Entry k only consumes leaves or
/// outputs of entries < k, so a reverse sweep is a valid backward order.
/// One tape per thread of control.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  /// Receives the output node; accumulates into the inputs it captured.
  using BackwardFn = std::function<void(const TensorNode<T>& out)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  void set_recording(bool record) { record_ = record; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const;

  /// Wraps a freshly computed value as an op output. The closure is only
  /// kept when recording and at least one input participates in autodiff.
  Tensor<T> record(const char* op, Shape shape, std::vector<T> value,
                   std::initializer_list<Tensor<T>> inputs, BackwardFn backward);

  /// Populates dLoss/dLeaf for every requires_grad leaf reachable from
  /// `loss`. Leaf gradients accumulate across calls; intermediate
  /// gradients are reset at the start of every call.
  void backward(const Tensor<T>& loss);

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    const char* op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool record_;
};

/// Throws NumericError naming `what` if any value is NaN/Inf.
template <typename T>
void check_finite(std::span<const T> values, const std::string& what);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad);

}  // namespace srclab
