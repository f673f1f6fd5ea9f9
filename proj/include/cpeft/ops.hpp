#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpeft/random.hpp"
#include "cpeft/tensor.hpp"

// Differentiable operations. Every op records itself on the active tape when
// at least one input requires a gradient, and is a plain computation
// otherwise.
namespace cpeft {

using TokenId = std::int32_t;

// Elementwise; `b` must have the shape of `a` or of a trailing suffix of it.
template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor);
template <typename S>
BasicTensor<S> silu(const BasicTensor<S>& x);
template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape);

// [..., m, k] x [..., k, n] -> [..., m, n] with numpy broadcasting over the
// leading dimensions.
template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b);

// x [..., d_in] * W [d_in, d_out] + bias [d_out]. `bias` may be undefined.
template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                      const BasicTensor<S>& bias);

template <typename S>
BasicTensor<S> softmax_rows(const BasicTensor<S>& x);

inline constexpr double kNormEps = 1e-5;

// x / sqrt(mean(x^2) + eps) * scale over the last dimension.
template <typename S>
BasicTensor<S> rms_norm(const BasicTensor<S>& x, const BasicTensor<S>& scale,
                        double eps = kNormEps);

// Rotates feature pairs (2i, 2i+1) of x [..., L, d_head] by
// positions[l] * base^(-2i / d_head).
template <typename S>
BasicTensor<S> apply_rope(const BasicTensor<S>& x, std::span<const std::size_t> positions,
                          double base);

// [batch * L, heads * d_head] <-> [batch, heads, L, d_head]
template <typename S>
BasicTensor<S> split_heads(const BasicTensor<S>& x, std::size_t batch, std::size_t heads);
template <typename S>
BasicTensor<S> merge_heads(const BasicTensor<S>& x);

// Scaled dot-product attention with a causal mask over q, k, v
// [batch, heads, L, d_head]. When `probs` is non-null it receives a detached
// copy of the post-softmax weights [batch, heads, L, L]; masked entries are
// exactly zero.
template <typename S>
BasicTensor<S> causal_attention(const BasicTensor<S>& q, const BasicTensor<S>& k,
                                const BasicTensor<S>& v, BasicTensor<S>* probs = nullptr);

// u [..., 2F] split into gate g and value v halves; returns silu(g) * v.
template <typename S>
BasicTensor<S> swiglu(const BasicTensor<S>& u);

template <typename S>
BasicTensor<S> gather_rows(const BasicTensor<S>& table, std::span<const TokenId> ids);

// Copy of x [N, d] with rows[i] replaced by block row i.
template <typename S>
BasicTensor<S> replace_rows(const BasicTensor<S>& x, std::span<const std::size_t> rows,
                            const BasicTensor<S>& block);

// Concatenation along the first dimension.
template <typename S>
BasicTensor<S> concat_rows(std::span<const BasicTensor<S>> parts);

// Inverted dropout; identity when p == 0.
template <typename S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double p, Rng& rng);

// Mean negative log-likelihood of `targets` under softmax(logits [N, V]) over
// the rows where mask is set.
template <typename S>
BasicTensor<S> masked_cross_entropy(const BasicTensor<S>& logits,
                                    std::span<const TokenId> targets,
                                    std::span<const std::uint8_t> mask);

// Per-row negative log-likelihood, no gradient tracking.
template <typename S>
std::vector<double> token_nll(const BasicTensor<S>& logits, std::span<const TokenId> targets);

}  // namespace cpeft
