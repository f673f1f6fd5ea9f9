#pragma once

#include <functional>
#include <span>

#include "cpeft/tensor.hpp"

namespace cpeft {

inline constexpr double kGradCheckStep = 1e-3;

// Compares the reverse-mode gradient of a scalar function with symmetric
// finite differences (f(x + h e_i) - f(x - h e_i)) / 2h, coordinate by
// coordinate. Returns the largest |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-8).
//
// `f` must read `leaf` and build its result from ops only; it is evaluated
// once on a fresh tape and then 2 * coords times without one. `coords`
// selects the coordinates to probe (all of them when empty). The leaf's data
// is restored afterwards; its gradient buffer holds the analytic gradient.
template <typename S>
double grad_check(const std::function<BasicTensor<S>()>& f, BasicTensor<S>& leaf,
                  double h = kGradCheckStep, std::span<const std::size_t> coords = {});

}  // namespace cpeft
