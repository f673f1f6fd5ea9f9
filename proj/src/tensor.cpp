#include "cpeft/tensor.hpp"

#include <sstream>

namespace cpeft {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
template <typename Scalar>
Tape<Scalar>*& current_tape() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename Scalar>
Tape<Scalar>* active_tape() {
  return current_tape<Scalar>();
}

template <typename Scalar>
TapeScope<Scalar>::TapeScope(Tape<Scalar>& tape) : previous_(current_tape<Scalar>()) {
  current_tape<Scalar>() = &tape;
}

template <typename Scalar>
TapeScope<Scalar>::~TapeScope() {
  current_tape<Scalar>() = previous_;
}

template <typename Scalar>
void Tape<Scalar>::record(std::vector<BasicTensor<Scalar>> inputs,
                          const BasicTensor<Scalar>& output, BackwardFn fn) {
  entries_.push_back(Entry{std::move(inputs), output, std::move(fn)});
}

template <typename Scalar>
void Tape<Scalar>::backward(const BasicTensor<Scalar>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : "<undefined>"));
  }
  std::size_t end = entries_.size();
  while (end > 0 && !entries_[end - 1].output.same_storage(loss)) --end;
  if (end == 0) {
    throw ContractViolation("backward(): loss was not produced on this tape");
  }

  BasicTensor<Scalar> seed = loss;
  seed.ensure_grad()[0] += Scalar(1);

  for (std::size_t i = end; i-- > 0;) {
    Entry& e = entries_[i];
    if (!e.output.has_grad()) continue;  // not reachable from the loss
    GradContext<Scalar> ctx;
    ctx.out_grad = e.output.grad();
    ctx.in_grads.reserve(e.inputs.size());
    for (auto& in : e.inputs) {
      if (in.defined() && in.requires_grad()) {
        ctx.in_grads.push_back(in.ensure_grad());
      } else {
        ctx.in_grads.emplace_back();
      }
    }
    e.fn(ctx);
  }
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();

}  // namespace cpeft
