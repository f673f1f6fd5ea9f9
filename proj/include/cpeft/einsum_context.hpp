#pragma once

#include <cstdint>
#include <span>

#include "cpeft/tensor.hpp"

namespace cpeft {

using ContextId = std::int32_t;

// Context-routed low-rank delta:
//   out[l] = (x[l] . A[c_l]) . B[c_l]
// for x [..., d] (rows flattened), A [C, d, r], B [C, r, D] and one context id
// per row. Rows are grouped by context and pushed through two small GEMMs, so
// no d x D matrix is ever formed; auxiliary storage stays within
// rows * (d + r + D) scalars.
template <typename S>
BasicTensor<S> einsum_context(const BasicTensor<S>& x, const BasicTensor<S>& a,
                              const BasicTensor<S>& b, std::span<const ContextId> contexts);

// Same contraction with an explicit one-hot selector s [..., C] whose leading
// dimensions match those of x.
template <typename S>
BasicTensor<S> einsum_context(const BasicTensor<S>& x, const BasicTensor<S>& a,
                              const BasicTensor<S>& b, const BasicTensor<S>& selector);

// Largest number of auxiliary scalars held at once by einsum_context on this
// thread since the last reset.
std::size_t einsum_scratch_peak();
void reset_einsum_scratch_peak();

}  // namespace cpeft
