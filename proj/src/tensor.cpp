#include "picn/tensor.hpp"

#include <sstream>

namespace picn {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  if (shape.size() > 4) throw ShapeError("tensor rank above 4: " + shape_str(shape));
  if (numel_of(shape) != values.size())
    throw ShapeError("tensor " + shape_str(shape) + " given " + std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= node_->shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return zeros(node_->shape);
  return Tensor(node_->shape, node_->grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::function<void()> backward_rule) {
  entries_.push_back(std::move(backward_rule));
}

void Tape::run_backward() {
  // Entries may not run while we iterate, so take ownership first.
  auto entries = std::move(entries_);
  entries_.clear();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) (*it)();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  auto& tape = Tape::current();
  if (!loss.requires_grad() || tape.size() == 0)
    throw std::logic_error("backward(): loss is not connected to any tensor requiring a gradient");
  loss.node()->grad_buffer()[0] += T(1);
  tape.run_backward();
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace picn
