#pragma once

#include <initializer_list>
#include <utility>
#include <vector>

#include "cpeft/tensor.hpp"

namespace cpeft::detail {

// True when an active tape exists and any defined input requires a gradient.
template <typename S>
bool tracking(std::initializer_list<const BasicTensor<S>*> inputs) {
  if (active_tape<S>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename S>
void record(BasicTensor<S>& out, std::vector<BasicTensor<S>> inputs,
            typename Tape<S>::BackwardFn fn) {
  mark_op_output(out);
  active_tape<S>()->record(std::move(inputs), out, std::move(fn));
}

}  // namespace cpeft::detail
