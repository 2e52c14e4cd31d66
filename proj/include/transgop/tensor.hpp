#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "transgop/errors.hpp"

namespace transgop {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;
};

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
    for (auto d : shape)
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Writable view. Only leaves (parameters, inputs under gradcheck) should be
  /// written after creation.
  std::span<T> mutable_data() { return impl_->data; }
  std::vector<T>& storage() { return impl_->data; }

  T operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  std::span<const T> grad_view() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
  }
  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

/// Records backward closures in execution order. One tape per forward pass;
/// not thread-safe.
template <class T>
class Tape {
 public:
  Tape() = default;
  /// A tape built with recording off drops every closure (inference).
  explicit Tape(bool recording) : recording_(recording) {}

  void record(std::function<void()> fn) {
    if (recording_) steps_.push_back(std::move(fn));
  }
  bool recording() const { return recording_; }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool recording_ = true;
};

template <class T>
void backward(Tensor<T> loss, Tape<T>& tape) {
  tape.backward(std::move(loss));
}

}  // namespace transgop
