#pragma once

#include <cstddef>

namespace cpeft {

// Hyperparameters of the decoder-only language model.
struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  // Width of the fused gate+up projection; the gated intermediate is half.
  std::size_t d_ffn_fused = 512;
  std::size_t d_ffn_inner = 256;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 128;
  double rope_base = 10000.0;
  // Adjusted-base-frequency RoPE; off by default since no base is pinned.
  bool rope_abf = false;
  double rope_abf_base = 500000.0;
  double dropout_p = 0.1;

  std::size_t d_head() const { return d_model / n_heads; }
  double effective_rope_base() const { return rope_abf ? rope_abf_base : rope_base; }

  // Throws ConfigError naming the offending field.
  void validate() const;

  // 768 wide, 12 layers, 12 heads, 6144/3072 SwiGLU, 128 context.
  static ModelConfig paper();
  // Desk-scale model used by the toy captioning task.
  static ModelConfig toy();

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace cpeft
