#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cpeft/errors.hpp"

namespace cpeft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
class Tape;

// Dense row-major array with an optional gradient slot.
//
// A BasicTensor is a handle: copies share storage, the way autograd frameworks
// treat tensors. Use clone() for an independent copy. Op outputs are never
// written again after the op returns; only leaves are mutated (by optimizers
// and gradient checks), and only between forward passes.
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, Scalar value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<Scalar> values,
                          bool requires_grad = false);
  static BasicTensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  // Negative indices count from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const Scalar> data() const { return impl_->data; }
  std::span<Scalar> mutable_data() { return impl_->data; }
  const std::vector<Scalar>& values() const { return impl_->data; }
  Scalar item() const;
  Scalar operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return impl_->has_grad; }
  std::span<const Scalar> grad() const { return impl_->grad; }
  std::span<Scalar> mutable_grad() { return impl_->grad; }
  // Gradient values, zeros when no buffer was ever allocated.
  std::vector<Scalar> grad_or_zero() const;
  // Allocates a zeroed gradient buffer if none exists.
  std::span<Scalar> ensure_grad();
  void zero_grad();
  void clear_grad();

  BasicTensor clone() const;
  BasicTensor detach() const;

  template <typename Other>
  BasicTensor<Other> cast(bool requires_grad = false) const {
    std::vector<Other> out(impl_->data.begin(), impl_->data.end());
    return BasicTensor<Other>::from(impl_->shape, std::move(out), requires_grad);
  }

  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;
    bool requires_grad = false;
    bool has_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Storage> impl_;

  friend class Tape<Scalar>;
  template <typename S>
  friend void mark_op_output(BasicTensor<S>& t);
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename Scalar>
struct GradContext {
  std::span<const Scalar> out_grad;
  // One entry per recorded input; empty when that input is frozen.
  std::vector<std::span<Scalar>> in_grads;
};

// Ordered record of differentiable operations. Entries are appended in
// execution order, so every entry's inputs precede it.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(GradContext<Scalar>&)>;

  void record(std::vector<BasicTensor<Scalar>> inputs,
              const BasicTensor<Scalar>& output, BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Reverse sweep from a scalar loss recorded on this tape. Gradients
  // accumulate into leaves; frozen tensors never receive a buffer.
  void backward(const BasicTensor<Scalar>& loss);

 private:
  struct Entry {
    std::vector<BasicTensor<Scalar>> inputs;
    BasicTensor<Scalar> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// Makes a tape the recording target for ops on this thread while in scope.
// Ops run outside any scope do not record and produce tensors without
// gradient tracking.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

template <typename Scalar>
Tape<Scalar>* active_tape();

template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss, Tape<Scalar>& tape) {
  tape.backward(loss);
}

template <typename S>
void mark_op_output(BasicTensor<S>& t) {
  t.impl_->requires_grad = true;
  t.impl_->leaf = false;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::full(Shape shape, Scalar value,
                                              bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from(Shape shape, std::vector<Scalar> values,
                                              bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  BasicTensor t;
  t.impl_ = std::make_shared<Storage>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename Scalar>
std::size_t BasicTensor<Scalar>::dim(int i) const {
  const int r = static_cast<int>(rank());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) {
    throw DimensionError("dimension index " + std::to_string(i) +
                         " out of range for shape " + shape_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(k)];
}

template <typename Scalar>
Scalar BasicTensor<Scalar>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  }
  return impl_->data[0];
}

template <typename Scalar>
BasicTensor<Scalar>& BasicTensor<Scalar>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) clear_grad();
  return *this;
}

template <typename Scalar>
std::vector<Scalar> BasicTensor<Scalar>::grad_or_zero() const {
  if (impl_->has_grad) return impl_->grad;
  return std::vector<Scalar>(numel(), Scalar(0));
}

template <typename Scalar>
std::span<Scalar> BasicTensor<Scalar>::ensure_grad() {
  if (!impl_->has_grad) {
    impl_->grad.assign(numel(), Scalar(0));
    impl_->has_grad = true;
  }
  return impl_->grad;
}

template <typename Scalar>
void BasicTensor<Scalar>::zero_grad() {
  if (impl_->has_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), Scalar(0));
}

template <typename Scalar>
void BasicTensor<Scalar>::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
  impl_->has_grad = false;
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::clone() const {
  return from(impl_->shape, impl_->data, impl_->requires_grad);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::detach() const {
  return from(impl_->shape, impl_->data, false);
}

}  // namespace cpeft
