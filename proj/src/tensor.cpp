#include "srclab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace srclab {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.empty()) throw ContractViolation("tensor shape must have at least one extent");
  for (auto e : shape)
    if (e == 0) throw ContractViolation("tensor extents must be positive, got " + shape_str(shape));
  if (numel(shape) != values.size())
    throw ContractViolation("shape " + shape_str(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw ContractViolation("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw ContractViolation("op outputs are immutable");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractViolation("item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ContractViolation("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw ContractViolation("index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->value, requires_grad);
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.emplace_back(e.op);
  return names;
}

template <typename T>
Tensor<T> Tape<T>::record(const char* op, Shape shape, std::vector<T> value,
                          std::initializer_list<Tensor<T>> inputs, BackwardFn backward) {
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  needs_grad = needs_grad && record_;

  Tensor<T> out(std::move(shape), std::move(value), needs_grad);
  out.node()->is_leaf = false;
  if (needs_grad) {
    Entry entry{op, {}, out.node(), std::move(backward)};
    entry.inputs.reserve(inputs.size());
    for (const auto& in : inputs) entry.inputs.push_back(in.node());
    entries_.push_back(std::move(entry));
  }
  return out;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ContractViolation("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractViolation("loss does not depend on any requires_grad tensor");
  check_finite<T>(loss.data(), "loss");

  for (auto& e : entries_) e.output->grad.clear();
  auto& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += T(1);

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& out = *it->output;
    if (out.grad.empty()) continue;
    for (auto& in : it->inputs)
      if (in->requires_grad) in->ensure_grad();
    it->backward(out);
  }
}

template <typename T>
void check_finite(std::span<const T> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]))
      throw NumericError("non-finite value in " + what + " at flat index " + std::to_string(i));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(v), requires_grad);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void check_finite<float>(std::span<const float>, const std::string&);
template void check_finite<double>(std::span<const double>, const std::string&);
template Tensor<double> cast<double, float>(const Tensor<float>&, bool);
template Tensor<float> cast<float, double>(const Tensor<double>&, bool);
template Tensor<float> cast<float, float>(const Tensor<float>&, bool);
template Tensor<double> cast<double, double>(const Tensor<double>&, bool);

}  // namespace srclab
