#include "cpeft/transformer.hpp"

#include <cstring>
#include <numeric>

namespace cpeft {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || vocab_size == 0) {
    fail("d_model, n_layers, n_heads and vocab_size must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_head() % 2 != 0) fail("d_model / n_heads must be even for rotary embeddings");
  if (d_ffn_inner == 0 || d_ffn_fused != 2 * d_ffn_inner) fail("d_ffn_fused must equal 2 * d_ffn_inner");
  if (max_seq < 2) fail("max_seq must be at least 2");
  if (!(rope_base > 1.0) || !(rope_abf_base > 1.0)) fail("rope base must exceed 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must be in [0, 1)");
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.d_model = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.d_ffn_fused = 6144;
  c.d_ffn_inner = 3072;
  c.vocab_size = 50272;
  c.max_seq = 128;
  return c;
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

template <typename S>
const BasicTensor<S>& LayerWeights<S>::weight(ProjectionSite site) const {
  switch (site) {
    case ProjectionSite::query: return wq;
    case ProjectionSite::key: return wk;
    case ProjectionSite::value: return wv;
    case ProjectionSite::output: return wo;
    case ProjectionSite::ffn_up: return w_up;
    case ProjectionSite::ffn_down: return w_down;
  }
  throw ConfigError("unknown projection site");
}

template <typename S>
const BasicTensor<S>& LayerWeights<S>::bias(ProjectionSite site) const {
  switch (site) {
    case ProjectionSite::query: return bq;
    case ProjectionSite::key: return bk;
    case ProjectionSite::value: return bv;
    case ProjectionSite::output: return bo;
    case ProjectionSite::ffn_up: return b_up;
    case ProjectionSite::ffn_down: return b_down;
  }
  throw ConfigError("unknown projection site");
}

template <typename S>
std::vector<std::pair<std::string, BasicTensor<S>>> TransformerWeights<S>::named_tensors() const {
  std::vector<std::pair<std::string, BasicTensor<S>>> out;
  out.emplace_back("token_embeddings", token_embeddings);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm", l.attn_norm);
    out.emplace_back(p + "wq", l.wq);
    out.emplace_back(p + "bq", l.bq);
    out.emplace_back(p + "wk", l.wk);
    out.emplace_back(p + "bk", l.bk);
    out.emplace_back(p + "wv", l.wv);
    out.emplace_back(p + "bv", l.bv);
    out.emplace_back(p + "wo", l.wo);
    out.emplace_back(p + "bo", l.bo);
    out.emplace_back(p + "ffn_norm", l.ffn_norm);
    out.emplace_back(p + "w_up", l.w_up);
    out.emplace_back(p + "b_up", l.b_up);
    out.emplace_back(p + "w_down", l.w_down);
    out.emplace_back(p + "b_down", l.b_down);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("lm_head", lm_head);
  return out;
}

template <typename S>
std::size_t TransformerWeights<S>::numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t.numel();
  return n;
}

template <typename S>
void TransformerWeights<S>::set_trainable(bool on) {
  for (auto& [name, t] : named_tensors()) {
    auto handle = t;
    handle.set_requires_grad(on);
  }
}

template <typename S>
template <typename Other>
TransformerWeights<Other> TransformerWeights<S>::cast() const {
  TransformerWeights<Other> out;
  out.config = config;
  auto c = [](const BasicTensor<S>& t) { return t.template cast<Other>(t.requires_grad()); };
  out.token_embeddings = c(token_embeddings);
  for (const auto& l : layers) {
    LayerWeights<Other> o;
    o.attn_norm = c(l.attn_norm);
    o.wq = c(l.wq);
    o.bq = c(l.bq);
    o.wk = c(l.wk);
    o.bk = c(l.bk);
    o.wv = c(l.wv);
    o.bv = c(l.bv);
    o.wo = c(l.wo);
    o.bo = c(l.bo);
    o.ffn_norm = c(l.ffn_norm);
    o.w_up = c(l.w_up);
    o.b_up = c(l.b_up);
    o.w_down = c(l.w_down);
    o.b_down = c(l.b_down);
    out.layers.push_back(std::move(o));
  }
  out.final_norm = c(final_norm);
  out.lm_head = c(lm_head);
  return out;
}

std::vector<std::pair<std::string, Shape>> model_layout(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("token_embeddings", Shape{config.vocab_size, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm", Shape{d});
    for (const char* n : {"q", "k", "v", "o"}) {
      out.emplace_back(p + "w" + n, Shape{d, d});
      out.emplace_back(p + "b" + n, Shape{d});
    }
    out.emplace_back(p + "ffn_norm", Shape{d});
    out.emplace_back(p + "w_up", Shape{d, config.d_ffn_fused});
    out.emplace_back(p + "b_up", Shape{config.d_ffn_fused});
    out.emplace_back(p + "w_down", Shape{config.d_ffn_inner, d});
    out.emplace_back(p + "b_down", Shape{d});
  }
  out.emplace_back("final_norm", Shape{d});
  out.emplace_back("lm_head", Shape{d, config.vocab_size});
  return out;
}

TransformerWeights<float> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto normal = [&rng](Shape shape) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 0.02));
    return Tensor::from(std::move(shape), std::move(v));
  };
  const std::size_t d = config.d_model;
  TransformerWeights<float> w;
  w.config = config;
  w.token_embeddings = normal({config.vocab_size, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<float> l;
    l.attn_norm = Tensor::full({d}, 1.0f);
    l.wq = normal({d, d});
    l.bq = Tensor::zeros({d});
    l.wk = normal({d, d});
    l.bk = Tensor::zeros({d});
    l.wv = normal({d, d});
    l.bv = Tensor::zeros({d});
    l.wo = normal({d, d});
    l.bo = Tensor::zeros({d});
    l.ffn_norm = Tensor::full({d}, 1.0f);
    l.w_up = normal({d, config.d_ffn_fused});
    l.b_up = Tensor::zeros({config.d_ffn_fused});
    l.w_down = normal({config.d_ffn_inner, d});
    l.b_down = Tensor::zeros({d});
    w.layers.push_back(std::move(l));
  }
  w.final_norm = Tensor::full({d}, 1.0f);
  w.lm_head = normal({d, config.vocab_size});
  return w;
}

namespace {

template <typename S>
void check_adaptors(const TransformerWeights<S>& weights, const AdaptorParams<S>& adaptors) {
  if (!(adaptors.config == weights.config) || adaptors.layers.size() != weights.layers.size()) {
    throw AdaptorError("adaptors were built for a different model configuration");
  }
  const auto expected = adaptor_layout(adaptors.spec, weights.config);
  const auto actual = adaptors.named_tensors();
  if (expected.size() != actual.size()) {
    throw AdaptorError("adaptor tensor count " + std::to_string(actual.size()) +
                       " does not match spec (" + std::to_string(expected.size()) + ")");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].first != actual[i].first || expected[i].second != actual[i].second.shape()) {
      throw AdaptorError("adaptor tensor " + actual[i].first + " has shape " +
                         shape_string(actual[i].second.shape()) + ", expected " +
                         shape_string(expected[i].second));
    }
  }
}

}  // namespace

template <typename S>
ForwardResult<S> forward(const TransformerWeights<S>& weights, const ModelInput<S>& input,
                         const AdaptorParams<S>* adaptors, const ForwardOptions& options) {
  const ModelConfig& cfg = weights.config;
  const std::size_t batch = input.batch, len = input.seq_len;
  if (len != cfg.max_seq) {
    throw DimensionError("forward: sequence length " + std::to_string(len) +
                         " differs from max_seq " + std::to_string(cfg.max_seq));
  }
  if (input.token_ids.size() != batch * len || input.context_ids.size() != batch * len) {
    throw DimensionError("forward: token/context id arrays do not cover batch * seq_len rows");
  }
  if (options.training && cfg.dropout_p > 0.0 && options.rng == nullptr) {
    throw ConfigError("forward: training mode needs an rng for dropout");
  }
  std::vector<ContextId> routed;
  if (adaptors != nullptr) {
    check_adaptors(weights, *adaptors);
    routed = route_contexts(adaptors->spec, input.context_ids);
  }
  const std::span<const ContextId> ctx(routed);

  BasicTensor<S> x = gather_rows(weights.token_embeddings, std::span<const TokenId>(input.token_ids));
  if (input.image_block.defined()) {
    x = replace_rows(x, std::span<const std::size_t>(input.image_rows), input.image_block);
  }

  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  const double rope_base = cfg.effective_rope_base();
  const bool drop = options.training && cfg.dropout_p > 0.0;

  ForwardResult<S> result;
  if (options.trace) result.traces.resize(batch);

  for (std::size_t li = 0; li < weights.layers.size(); ++li) {
    const auto& layer = weights.layers[li];
    const LayerAdaptors<S>* la = adaptors != nullptr ? &adaptors->layers[li] : nullptr;

    auto h = rms_norm(x, layer.attn_norm);
    auto q = adapted_projection(h, layer.wq, layer.bq, la, ProjectionSite::query, ctx);
    auto k = adapted_projection(h, layer.wk, layer.bk, la, ProjectionSite::key, ctx);
    auto v = adapted_projection(h, layer.wv, layer.bv, la, ProjectionSite::value, ctx);
    k = adapted_scale(k, la, ScaleSite::key, ctx);
    v = adapted_scale(v, la, ScaleSite::value, ctx);

    auto qh = apply_rope(split_heads(q, batch, cfg.n_heads), positions, rope_base);
    auto kh = apply_rope(split_heads(k, batch, cfg.n_heads), positions, rope_base);
    auto vh = split_heads(v, batch, cfg.n_heads);
    BasicTensor<S> probs;
    auto att = merge_heads(causal_attention(qh, kh, vh, options.trace ? &probs : nullptr));
    auto o = adapted_projection(att, layer.wo, layer.bo, la, ProjectionSite::output, ctx);
    if (drop) o = dropout(o, cfg.dropout_p, *options.rng);
    x = add(x, o);

    if (options.trace) {
      const std::size_t per = cfg.n_heads * len * len;
      for (std::size_t b = 0; b < batch; ++b) {
        std::vector<S> slice(probs.data().begin() + b * per, probs.data().begin() + (b + 1) * per);
        result.traces[b].layers.push_back(
            BasicTensor<S>::from({cfg.n_heads, len, len}, std::move(slice)));
      }
    }

    h = rms_norm(x, layer.ffn_norm);
    auto u = adapted_projection(h, layer.w_up, layer.b_up, la, ProjectionSite::ffn_up, ctx);
    auto inner = adapted_scale(swiglu(u), la, ScaleSite::ffn_inner, ctx);
    auto f = adapted_projection(inner, layer.w_down, layer.b_down, la, ProjectionSite::ffn_down, ctx);
    if (drop) f = dropout(f, cfg.dropout_p, *options.rng);
    x = add(x, f);
  }

  x = rms_norm(x, weights.final_norm);
  result.logits = linear(x, weights.lm_head, BasicTensor<S>{});
  return result;
}

template <typename S>
BasicTensor<S> swiglu_ffn(const BasicTensor<S>& x, const LayerWeights<S>& layer) {
  return linear(swiglu(linear(x, layer.w_up, layer.b_up)), layer.w_down, layer.b_down);
}

std::uint64_t weights_hash(const TransformerWeights<float>& weights) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : weights.named_tensors()) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.numel() * sizeof(float));
  }
  return h;
}

template struct LayerWeights<float>;
template struct LayerWeights<double>;
template struct TransformerWeights<float>;
template struct TransformerWeights<double>;
template TransformerWeights<double> TransformerWeights<float>::cast<double>() const;
template TransformerWeights<float> TransformerWeights<double>::cast<float>() const;
template ForwardResult<float> forward(const TransformerWeights<float>&, const ModelInput<float>&,
                                      const AdaptorParams<float>*, const ForwardOptions&);
template ForwardResult<double> forward(const TransformerWeights<double>&, const ModelInput<double>&,
                                       const AdaptorParams<double>*, const ForwardOptions&);
template BasicTensor<float> swiglu_ffn(const BasicTensor<float>&, const LayerWeights<float>&);
template BasicTensor<double> swiglu_ffn(const BasicTensor<double>&, const LayerWeights<double>&);

}  // namespace cpeft
