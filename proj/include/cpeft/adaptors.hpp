#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpeft/einsum_context.hpp"
#include "cpeft/model_config.hpp"
#include "cpeft/tensor.hpp"

namespace cpeft {

enum class AdaptorKind { lora, bitfit, ia3 };

std::string to_string(AdaptorKind kind);
AdaptorKind parse_adaptor_kind(const std::string& text);

// Linear projections of one transformer block, in storage order.
enum class ProjectionSite : std::size_t { query, key, value, output, ffn_up, ffn_down };
inline constexpr std::size_t kProjectionSites = 6;

// Activations that IA3 rescales.
enum class ScaleSite : std::size_t { key, value, ffn_inner };
inline constexpr std::size_t kScaleSites = 3;

const char* site_name(ProjectionSite site);
const char* site_name(ScaleSite site);
bool is_attention_site(ProjectionSite site);
bool is_attention_site(ScaleSite site);
// (d_in, d_out) of a projection under a config.
std::pair<std::size_t, std::size_t> projection_dims(ProjectionSite site, const ModelConfig& config);
std::size_t scale_width(ScaleSite site, const ModelConfig& config);

struct AdaptorSpec {
  AdaptorKind kind = AdaptorKind::lora;
  std::size_t rank = 4;  // lora only
  bool attention = true;
  bool ffn = true;
  std::size_t num_contexts = 2;
  bool context_specific = true;

  // Number of parameter groups actually allocated: num_contexts when
  // context-specific, otherwise 1.
  std::size_t effective_contexts() const { return context_specific ? num_contexts : 1; }
  bool targets(ProjectionSite site) const;
  bool targets(ScaleSite site) const;
  // "A", "F" or "AF".
  std::string target_label() const;
  // Throws SpecError.
  void validate(const ModelConfig& config) const;

  bool operator==(const AdaptorSpec&) const = default;
};

template <typename S>
struct LoraFactors {
  BasicTensor<S> a;  // [C, d_in, r]
  BasicTensor<S> b;  // [C, r, d_out]
};

// Adaptor tensors of one block; entries for untargeted sites stay undefined.
template <typename S>
struct LayerAdaptors {
  std::array<LoraFactors<S>, kProjectionSites> lora;
  std::array<BasicTensor<S>, kProjectionSites> bias;   // [C, d_out]
  std::array<BasicTensor<S>, kScaleSites> scale;       // [C, width]
};

// The trainable state of a PEFT run.
template <typename S>
struct AdaptorParams {
  AdaptorSpec spec;
  ModelConfig config;
  std::vector<LayerAdaptors<S>> layers;

  // Every allocated tensor with a stable hierarchical name.
  std::vector<std::pair<std::string, BasicTensor<S>>> named_tensors() const;
  std::size_t numel() const;

  template <typename Other>
  AdaptorParams<Other> cast() const;
};

// Shapes `attach` allocates for a spec, in named_tensors() order.
std::vector<std::pair<std::string, Shape>> adaptor_layout(const AdaptorSpec& spec,
                                                          const ModelConfig& config);

// Allocates neutral adaptors: LoRA A ~ N(0, 0.02) and B = 0, BitFit shifts
// 0, IA3 scales 1. All tensors require gradients.
AdaptorParams<float> attach(const AdaptorSpec& spec, const ModelConfig& config, std::uint64_t seed);

// Closed-form trainable scalar count for a spec.
std::size_t count_trainable(const AdaptorSpec& spec, const ModelConfig& config);

// Maps raw per-position context ids to adaptor groups: all zero when only
// one group exists, otherwise checked against [0, C).
std::vector<ContextId> route_contexts(const AdaptorSpec& spec, std::span<const ContextId> contexts);

// h = x W + b + (x A[c]) B[c], through einsum_context.
template <typename S>
BasicTensor<S> apply_context_lora(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                                  const BasicTensor<S>& bias, const LoraFactors<S>& factors,
                                  std::span<const ContextId> contexts);

// h[l] + shift[c_l] for h [..., d_out] and shift [C, d_out].
template <typename S>
BasicTensor<S> apply_context_bitfit(const BasicTensor<S>& h, const BasicTensor<S>& shift,
                                    std::span<const ContextId> contexts);

// act[l] * scale[c_l] for act [..., w] and scale [C, w].
template <typename S>
BasicTensor<S> apply_context_ia3(const BasicTensor<S>& act, const BasicTensor<S>& scale,
                                 std::span<const ContextId> contexts);

// Projection of x through a (possibly adapted) site. `adaptors` may be null.
template <typename S>
BasicTensor<S> adapted_projection(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                                  const BasicTensor<S>& bias, const LayerAdaptors<S>* adaptors,
                                  ProjectionSite site, std::span<const ContextId> contexts);

template <typename S>
BasicTensor<S> adapted_scale(const BasicTensor<S>& act, const LayerAdaptors<S>* adaptors,
                             ScaleSite site, std::span<const ContextId> contexts);

inline constexpr std::size_t kOracleMaxEntries = std::size_t{1} << 20;

// Reference for the LoRA delta: builds dW_c = A[c] B[c] explicitly and applies
// it row by row in double precision. Refuses (RefusalError) when d_in * d_out
// exceeds kOracleMaxEntries.
template <typename S>
BasicTensor<S> materialize_delta_oracle(const BasicTensor<S>& x, const BasicTensor<S>& a,
                                        const BasicTensor<S>& b, std::span<const ContextId> contexts);

// Adaptor archives carry the spec and model config in their manifest, so they
// can be attached to any base built from the same config.
void save_adaptors(const std::filesystem::path& path, const AdaptorParams<float>& params);
AdaptorParams<float> load_adaptors(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace cpeft
