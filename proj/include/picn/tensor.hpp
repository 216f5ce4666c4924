#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace picn {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Storage shared between a Tensor handle and the tape entries that reference it.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient yet" (implicitly zero)
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Row-major dense tensor of rank <= 4 with reference semantics: copies of a
// Tensor share storage. Operations in ops.hpp never mutate their inputs.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access, intended for initializers and optimizers only.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient as a tensor of the same shape; zeros when none was accumulated.
  Tensor grad() const;
  std::span<const T> grad_data() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no gradient history, fresh storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<TensorNode<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of backward rules. Each thread owns one tape; operations
// append to it while recording is enabled and at least one input requires
// a gradient.
class Tape {
 public:
  static Tape& current();

  bool recording() const { return enabled_; }
  void record(std::function<void()> backward_rule);
  std::size_t size() const { return entries_.size(); }
  // Visits every entry once, newest first, then clears the tape.
  void run_backward();
  void clear() { entries_.clear(); }

 private:
  friend class NoGradGuard;
  friend class TapeScope;
  std::vector<std::function<void()>> entries_;
  bool enabled_ = true;
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().enabled_) { Tape::current().enabled_ = false; }
  ~NoGradGuard() { Tape::current().enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Sets the thread's tape aside for a nested forward/backward (for example a
// discriminator update between a generator forward and its backward).
class TapeScope {
 public:
  TapeScope() { saved_.swap(Tape::current().entries_); }
  ~TapeScope() { Tape::current().entries_.swap(saved_); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  std::vector<std::function<void()>> saved_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape. Gradients accumulate into
// every tensor that requires them; the tape is cleared afterwards.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace picn
