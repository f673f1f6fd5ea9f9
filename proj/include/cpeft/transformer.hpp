#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpeft/adaptors.hpp"
#include "cpeft/model_config.hpp"
#include "cpeft/ops.hpp"
#include "cpeft/random.hpp"
#include "cpeft/tensor.hpp"

namespace cpeft {

template <typename S>
struct LayerWeights {
  BasicTensor<S> attn_norm;  // [d_model]
  BasicTensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicTensor<S> ffn_norm;   // [d_model]
  BasicTensor<S> w_up, b_up;      // [d_model, d_ffn_fused], [d_ffn_fused]
  BasicTensor<S> w_down, b_down;  // [d_ffn_inner, d_model], [d_model]

  const BasicTensor<S>& weight(ProjectionSite site) const;
  const BasicTensor<S>& bias(ProjectionSite site) const;
};

// Frozen parameters of the language model.
template <typename S>
struct TransformerWeights {
  ModelConfig config;
  BasicTensor<S> token_embeddings;  // [vocab, d_model]
  std::vector<LayerWeights<S>> layers;
  BasicTensor<S> final_norm;        // [d_model]
  BasicTensor<S> lm_head;           // [d_model, vocab]

  std::vector<std::pair<std::string, BasicTensor<S>>> named_tensors() const;
  std::size_t numel() const;
  void set_trainable(bool on);

  template <typename Other>
  TransformerWeights<Other> cast() const;
};

// Names and shapes of the base tensors, in named_tensors() order, without
// allocating them.
std::vector<std::pair<std::string, Shape>> model_layout(const ModelConfig& config);

// N(0, 0.02) weights, zero biases, unit norm scales; deterministic in seed.
TransformerWeights<float> init_model(const ModelConfig& config, std::uint64_t seed);

// Per-layer post-softmax attention weights [n_heads, L, L] of one sequence.
template <typename S>
struct BasicAttentionTrace {
  std::vector<BasicTensor<S>> layers;
};
using AttentionTrace = BasicAttentionTrace<float>;

// A batch of fixed-length sequences flattened to batch * seq_len rows.
template <typename S>
struct ModelInput {
  std::size_t batch = 1;
  std::size_t seq_len = 0;
  std::vector<TokenId> token_ids;
  std::vector<ContextId> context_ids;
  // Rows (in the flattened batch) whose token embedding is replaced by the
  // matching row of image_block. image_block may be undefined.
  std::vector<std::size_t> image_rows;
  BasicTensor<S> image_block;
};

struct ForwardOptions {
  bool trace = false;
  // Enables residual dropout; requires rng.
  bool training = false;
  Rng* rng = nullptr;
};

template <typename S>
struct ForwardResult {
  BasicTensor<S> logits;  // [batch * seq_len, vocab]
  std::vector<BasicAttentionTrace<S>> traces;  // one per sequence when traced
};

template <typename S>
ForwardResult<S> forward(const TransformerWeights<S>& weights, const ModelInput<S>& input,
                         const AdaptorParams<S>* adaptors = nullptr,
                         const ForwardOptions& options = {});

// SwiGLU feed-forward of one block without adaptors.
template <typename S>
BasicTensor<S> swiglu_ffn(const BasicTensor<S>& x, const LayerWeights<S>& layer);

// 64-bit FNV-1a over tensor names and bytes.
std::uint64_t weights_hash(const TransformerWeights<float>& weights);

}  // namespace cpeft
