#include "cpeft/adaptors.hpp"

#include "cpeft/archive.hpp"
#include "cpeft/config_json.hpp"
#include "cpeft/ops.hpp"
#include "cpeft/random.hpp"
#include "op_support.hpp"

namespace cpeft {

std::string to_string(AdaptorKind kind) {
  switch (kind) {
    case AdaptorKind::lora: return "lora";
    case AdaptorKind::bitfit: return "bitfit";
    case AdaptorKind::ia3: return "ia3";
  }
  return "?";
}

AdaptorKind parse_adaptor_kind(const std::string& text) {
  if (text == "lora") return AdaptorKind::lora;
  if (text == "bitfit") return AdaptorKind::bitfit;
  if (text == "ia3") return AdaptorKind::ia3;
  throw SpecError("unknown adaptor kind '" + text + "' (expected lora, bitfit or ia3)");
}

const char* site_name(ProjectionSite site) {
  static constexpr const char* kNames[] = {"q", "k", "v", "o", "up", "down"};
  return kNames[static_cast<std::size_t>(site)];
}

const char* site_name(ScaleSite site) {
  static constexpr const char* kNames[] = {"key", "value", "ffn_inner"};
  return kNames[static_cast<std::size_t>(site)];
}

bool is_attention_site(ProjectionSite site) {
  return site != ProjectionSite::ffn_up && site != ProjectionSite::ffn_down;
}

bool is_attention_site(ScaleSite site) { return site != ScaleSite::ffn_inner; }

std::pair<std::size_t, std::size_t> projection_dims(ProjectionSite site, const ModelConfig& c) {
  switch (site) {
    case ProjectionSite::ffn_up: return {c.d_model, c.d_ffn_fused};
    case ProjectionSite::ffn_down: return {c.d_ffn_inner, c.d_model};
    default: return {c.d_model, c.d_model};
  }
}

std::size_t scale_width(ScaleSite site, const ModelConfig& c) {
  return site == ScaleSite::ffn_inner ? c.d_ffn_inner : c.d_model;
}

bool AdaptorSpec::targets(ProjectionSite site) const {
  if (kind == AdaptorKind::ia3) return false;
  return is_attention_site(site) ? attention : ffn;
}

bool AdaptorSpec::targets(ScaleSite site) const {
  if (kind != AdaptorKind::ia3) return false;
  return is_attention_site(site) ? attention : ffn;
}

std::string AdaptorSpec::target_label() const {
  return std::string(attention ? "A" : "") + (ffn ? "F" : "");
}

void AdaptorSpec::validate(const ModelConfig& config) const {
  config.validate();
  if (!attention && !ffn) throw SpecError("adaptor spec: empty target set");
  if (kind == AdaptorKind::lora && rank == 0) throw SpecError("adaptor spec: lora rank must be positive");
  if (num_contexts == 0) throw SpecError("adaptor spec: num_contexts must be at least 1");
}

std::vector<std::pair<std::string, Shape>> adaptor_layout(const AdaptorSpec& spec,
                                                          const ModelConfig& config) {
  spec.validate(config);
  const std::size_t c = spec.effective_contexts();
  std::vector<std::pair<std::string, Shape>> out;
  for (std::size_t li = 0; li < config.n_layers; ++li) {
    const std::string p = "layers." + std::to_string(li) + ".";
    for (std::size_t s = 0; s < kProjectionSites; ++s) {
      const auto site = static_cast<ProjectionSite>(s);
      if (!spec.targets(site)) continue;
      const auto [din, dout] = projection_dims(site, config);
      if (spec.kind == AdaptorKind::lora) {
        out.emplace_back(p + site_name(site) + ".lora_a", Shape{c, din, spec.rank});
        out.emplace_back(p + site_name(site) + ".lora_b", Shape{c, spec.rank, dout});
      } else {
        out.emplace_back(p + site_name(site) + ".bitfit", Shape{c, dout});
      }
    }
    for (std::size_t s = 0; s < kScaleSites; ++s) {
      const auto site = static_cast<ScaleSite>(s);
      if (!spec.targets(site)) continue;
      out.emplace_back(p + "ia3." + site_name(site), Shape{c, scale_width(site, config)});
    }
  }
  return out;
}

template <typename S>
std::vector<std::pair<std::string, BasicTensor<S>>> AdaptorParams<S>::named_tensors() const {
  std::vector<std::pair<std::string, BasicTensor<S>>> out;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const std::string p = "layers." + std::to_string(li) + ".";
    for (std::size_t s = 0; s < kProjectionSites; ++s) {
      const char* name = site_name(static_cast<ProjectionSite>(s));
      if (l.lora[s].a.defined()) {
        out.emplace_back(p + name + ".lora_a", l.lora[s].a);
        out.emplace_back(p + name + ".lora_b", l.lora[s].b);
      }
      if (l.bias[s].defined()) out.emplace_back(p + name + ".bitfit", l.bias[s]);
    }
    for (std::size_t s = 0; s < kScaleSites; ++s) {
      if (l.scale[s].defined()) {
        out.emplace_back(p + "ia3." + site_name(static_cast<ScaleSite>(s)), l.scale[s]);
      }
    }
  }
  return out;
}

template <typename S>
std::size_t AdaptorParams<S>::numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t.numel();
  return n;
}

template <typename S>
template <typename Other>
AdaptorParams<Other> AdaptorParams<S>::cast() const {
  AdaptorParams<Other> out;
  out.spec = spec;
  out.config = config;
  auto c = [](const BasicTensor<S>& t) {
    return t.defined() ? t.template cast<Other>(t.requires_grad()) : BasicTensor<Other>{};
  };
  for (const auto& l : layers) {
    LayerAdaptors<Other> o;
    for (std::size_t s = 0; s < kProjectionSites; ++s) {
      o.lora[s].a = c(l.lora[s].a);
      o.lora[s].b = c(l.lora[s].b);
      o.bias[s] = c(l.bias[s]);
    }
    for (std::size_t s = 0; s < kScaleSites; ++s) o.scale[s] = c(l.scale[s]);
    out.layers.push_back(std::move(o));
  }
  return out;
}

AdaptorParams<float> attach(const AdaptorSpec& spec, const ModelConfig& config, std::uint64_t seed) {
  spec.validate(config);
  Rng rng(seed);
  const std::size_t c = spec.effective_contexts();
  AdaptorParams<float> params;
  params.spec = spec;
  params.config = config;
  for (std::size_t li = 0; li < config.n_layers; ++li) {
    LayerAdaptors<float> l;
    for (std::size_t s = 0; s < kProjectionSites; ++s) {
      const auto site = static_cast<ProjectionSite>(s);
      if (!spec.targets(site)) continue;
      const auto [din, dout] = projection_dims(site, config);
      if (spec.kind == AdaptorKind::lora) {
        std::vector<float> a(c * din * spec.rank);
        for (auto& v : a) v = static_cast<float>(rng.normal(0.0, 0.02));
        l.lora[s].a = Tensor::from({c, din, spec.rank}, std::move(a), true);
        l.lora[s].b = Tensor::zeros({c, spec.rank, dout}, true);
      } else {
        l.bias[s] = Tensor::zeros({c, dout}, true);
      }
    }
    for (std::size_t s = 0; s < kScaleSites; ++s) {
      const auto site = static_cast<ScaleSite>(s);
      if (spec.targets(site)) l.scale[s] = Tensor::full({c, scale_width(site, config)}, 1.0f, true);
    }
    params.layers.push_back(std::move(l));
  }
  return params;
}

std::size_t count_trainable(const AdaptorSpec& spec, const ModelConfig& config) {
  spec.validate(config);
  const std::size_t d = config.d_model;
  std::size_t per_layer = 0;
  switch (spec.kind) {
    case AdaptorKind::lora:
      // r * (d_in + d_out) summed over adapted projections
      if (spec.attention) per_layer += spec.rank * 4 * (d + d);
      if (spec.ffn) per_layer += spec.rank * ((d + config.d_ffn_fused) + (config.d_ffn_inner + d));
      break;
    case AdaptorKind::bitfit:
      // one shift per projection output
      if (spec.attention) per_layer += 4 * d;
      if (spec.ffn) per_layer += config.d_ffn_fused + d;
      break;
    case AdaptorKind::ia3:
      if (spec.attention) per_layer += 2 * d;
      if (spec.ffn) per_layer += config.d_ffn_inner;
      break;
  }
  return per_layer * config.n_layers * spec.effective_contexts();
}

std::vector<ContextId> route_contexts(const AdaptorSpec& spec, std::span<const ContextId> contexts) {
  const std::size_t groups = spec.effective_contexts();
  std::vector<ContextId> out(contexts.size(), 0);
  if (groups == 1) return out;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    if (contexts[i] < 0 || static_cast<std::size_t>(contexts[i]) >= groups) {
      throw RoutingError("context id " + std::to_string(contexts[i]) + " at position " +
                         std::to_string(i) + " outside [0, " + std::to_string(groups) + ")");
    }
    out[i] = contexts[i];
  }
  return out;
}

namespace {

template <typename S>
std::size_t check_routed(const BasicTensor<S>& act, const BasicTensor<S>& table,
                         std::span<const ContextId> contexts, const char* op) {
  if (table.rank() != 2 || act.rank() < 1 || table.dim(1) != act.dim(-1)) {
    throw DimensionError(std::string(op) + ": activations " + shape_string(act.shape()) +
                         " vs parameters " + shape_string(table.shape()));
  }
  const std::size_t rows = act.numel() / act.dim(-1);
  if (contexts.size() != rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(contexts.size()) +
                         " context ids for " + std::to_string(rows) + " rows");
  }
  for (ContextId c : contexts) {
    if (c < 0 || static_cast<std::size_t>(c) >= table.dim(0)) {
      throw RoutingError(std::string(op) + ": context id " + std::to_string(c) + " outside [0, " +
                         std::to_string(table.dim(0)) + ")");
    }
  }
  return rows;
}

}  // namespace

template <typename S>
BasicTensor<S> apply_context_lora(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                                  const BasicTensor<S>& bias, const LoraFactors<S>& factors,
                                  std::span<const ContextId> contexts) {
  return add(linear(x, weight, bias), einsum_context(x, factors.a, factors.b, contexts));
}

template <typename S>
BasicTensor<S> apply_context_bitfit(const BasicTensor<S>& h, const BasicTensor<S>& shift,
                                    std::span<const ContextId> contexts) {
  const std::size_t rows = check_routed(h, shift, contexts, "apply_context_bitfit");
  const std::size_t w = h.dim(-1);
  std::vector<S> out(h.values());
  const auto sd = shift.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* src = sd.data() + static_cast<std::size_t>(contexts[r]) * w;
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] += src[j];
  }
  auto result = BasicTensor<S>::from(h.shape(), std::move(out));
  if (detail::tracking<S>({&h, &shift})) {
    detail::record<S>(result, {h, shift},
                      [ctx = std::vector<ContextId>(contexts.begin(), contexts.end()), rows,
                       w](GradContext<S>& g) {
                        if (!g.in_grads[0].empty()) {
                          for (std::size_t i = 0; i < rows * w; ++i) g.in_grads[0][i] += g.out_grad[i];
                        }
                        if (!g.in_grads[1].empty()) {
                          for (std::size_t r = 0; r < rows; ++r) {
                            S* dst = g.in_grads[1].data() + static_cast<std::size_t>(ctx[r]) * w;
                            for (std::size_t j = 0; j < w; ++j) dst[j] += g.out_grad[r * w + j];
                          }
                        }
                      });
  }
  return result;
}

template <typename S>
BasicTensor<S> apply_context_ia3(const BasicTensor<S>& act, const BasicTensor<S>& scale,
                                 std::span<const ContextId> contexts) {
  const std::size_t rows = check_routed(act, scale, contexts, "apply_context_ia3");
  const std::size_t w = act.dim(-1);
  std::vector<S> out(act.values());
  const auto sd = scale.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* src = sd.data() + static_cast<std::size_t>(contexts[r]) * w;
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] *= src[j];
  }
  auto result = BasicTensor<S>::from(act.shape(), std::move(out));
  if (detail::tracking<S>({&act, &scale})) {
    detail::record<S>(result, {act, scale},
                      [act, scale, ctx = std::vector<ContextId>(contexts.begin(), contexts.end()),
                       rows, w](GradContext<S>& g) {
                        const auto ad = act.data();
                        const auto sd = scale.data();
                        for (std::size_t r = 0; r < rows; ++r) {
                          const std::size_t c = static_cast<std::size_t>(ctx[r]);
                          for (std::size_t j = 0; j < w; ++j) {
                            const S go = g.out_grad[r * w + j];
                            if (!g.in_grads[0].empty()) g.in_grads[0][r * w + j] += go * sd[c * w + j];
                            if (!g.in_grads[1].empty()) g.in_grads[1][c * w + j] += go * ad[r * w + j];
                          }
                        }
                      });
  }
  return result;
}

template <typename S>
BasicTensor<S> adapted_projection(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                                  const BasicTensor<S>& bias, const LayerAdaptors<S>* adaptors,
                                  ProjectionSite site, std::span<const ContextId> contexts) {
  const std::size_t s = static_cast<std::size_t>(site);
  if (adaptors == nullptr) return linear(x, weight, bias);
  BasicTensor<S> h = adaptors->lora[s].a.defined()
                         ? apply_context_lora(x, weight, bias, adaptors->lora[s], contexts)
                         : linear(x, weight, bias);
  if (adaptors->bias[s].defined()) h = apply_context_bitfit(h, adaptors->bias[s], contexts);
  return h;
}

template <typename S>
BasicTensor<S> adapted_scale(const BasicTensor<S>& act, const LayerAdaptors<S>* adaptors,
                             ScaleSite site, std::span<const ContextId> contexts) {
  if (adaptors == nullptr) return act;
  const auto& scale = adaptors->scale[static_cast<std::size_t>(site)];
  return scale.defined() ? apply_context_ia3(act, scale, contexts) : act;
}

template <typename S>
BasicTensor<S> materialize_delta_oracle(const BasicTensor<S>& x, const BasicTensor<S>& a,
                                        const BasicTensor<S>& b, std::span<const ContextId> contexts) {
  if (a.rank() != 3 || b.rank() != 3 || x.rank() < 1 || a.dim(1) != x.dim(-1) ||
      b.dim(0) != a.dim(0) || b.dim(1) != a.dim(2)) {
    throw DimensionError("materialize_delta_oracle: x " + shape_string(x.shape()) + ", A " +
                         shape_string(a.shape()) + ", B " + shape_string(b.shape()));
  }
  const std::size_t nctx = a.dim(0), din = a.dim(1), rank = a.dim(2), dout = b.dim(2);
  if (din * dout > kOracleMaxEntries) {
    throw RefusalError("materialize_delta_oracle: " + std::to_string(din) + "x" +
                       std::to_string(dout) + " delta exceeds the oracle size guard");
  }
  const std::size_t rows = x.numel() / din;
  if (contexts.size() != rows) throw DimensionError("materialize_delta_oracle: context count mismatch");
  for (ContextId c : contexts) {
    if (c < 0 || static_cast<std::size_t>(c) >= nctx) {
      throw RoutingError("materialize_delta_oracle: context id out of range");
    }
  }
  const auto ad = a.data();
  const auto bd = b.data();
  const auto xd = x.data();
  std::vector<std::vector<double>> delta(nctx, std::vector<double>(din * dout, 0.0));
  for (std::size_t c = 0; c < nctx; ++c) {
    for (std::size_t i = 0; i < din; ++i) {
      for (std::size_t k = 0; k < rank; ++k) {
        const double aik = ad[(c * din + i) * rank + k];
        for (std::size_t j = 0; j < dout; ++j) {
          delta[c][i * dout + j] += aik * static_cast<double>(bd[(c * rank + k) * dout + j]);
        }
      }
    }
  }
  Shape shape = x.shape();
  shape.back() = dout;
  std::vector<S> out(rows * dout);
  std::vector<double> acc(dout);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& dw = delta[static_cast<std::size_t>(contexts[r])];
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < din; ++i) {
      const double xi = xd[r * din + i];
      for (std::size_t j = 0; j < dout; ++j) acc[j] += xi * dw[i * dout + j];
    }
    for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] = static_cast<S>(acc[j]);
  }
  return BasicTensor<S>::from(std::move(shape), std::move(out));
}

void save_adaptors(const std::filesystem::path& path, const AdaptorParams<float>& params) {
  TensorArchive archive;
  archive.metadata["kind"] = "adaptors";
  archive.metadata["adaptor_spec"] = nlohmann::json(params.spec).dump();
  archive.metadata["model_config"] = nlohmann::json(params.config).dump();
  for (const auto& [name, t] : params.named_tensors()) archive.add(name, t);
  write_archive(path, archive);
}

AdaptorParams<float> load_adaptors(const std::filesystem::path& path, const ModelConfig& expected) {
  TensorArchive archive;
  AdaptorSpec spec;
  ModelConfig config;
  try {
    archive = read_archive(path);
    spec = nlohmann::json::parse(archive.metadata.at("adaptor_spec")).get<AdaptorSpec>();
    config = nlohmann::json::parse(archive.metadata.at("model_config")).get<ModelConfig>();
  } catch (const std::exception& e) {
    throw LoadError("adaptor archive '" + path.string() + "': " + e.what());
  }
  if (!(config == expected)) {
    throw LoadError("adaptor archive '" + path.string() + "' was built for a different model config");
  }
  AdaptorParams<float> params = attach(spec, config, 0);
  for (auto& [name, t] : params.named_tensors()) {
    if (!archive.contains(name) || archive.get(name).shape() != t.shape()) {
      throw LoadError("adaptor archive '" + path.string() + "': missing or misshapen " + name);
    }
    const auto src = archive.get(name).data();
    auto handle = t;
    std::copy(src.begin(), src.end(), handle.mutable_data().begin());
  }
  return params;
}

#define CPEFT_INSTANTIATE_ADAPTORS(S)                                                              \
  template struct AdaptorParams<S>;                                                                \
  template BasicTensor<S> apply_context_lora(const BasicTensor<S>&, const BasicTensor<S>&,         \
                                             const BasicTensor<S>&, const LoraFactors<S>&,         \
                                             std::span<const ContextId>);                          \
  template BasicTensor<S> apply_context_bitfit(const BasicTensor<S>&, const BasicTensor<S>&,       \
                                               std::span<const ContextId>);                        \
  template BasicTensor<S> apply_context_ia3(const BasicTensor<S>&, const BasicTensor<S>&,          \
                                            std::span<const ContextId>);                           \
  template BasicTensor<S> adapted_projection(const BasicTensor<S>&, const BasicTensor<S>&,         \
                                             const BasicTensor<S>&, const LayerAdaptors<S>*,       \
                                             ProjectionSite, std::span<const ContextId>);          \
  template BasicTensor<S> adapted_scale(const BasicTensor<S>&, const LayerAdaptors<S>*, ScaleSite, \
                                        std::span<const ContextId>);                               \
  template BasicTensor<S> materialize_delta_oracle(const BasicTensor<S>&, const BasicTensor<S>&,   \
                                                   const BasicTensor<S>&, std::span<const ContextId>);

CPEFT_INSTANTIATE_ADAPTORS(float)
CPEFT_INSTANTIATE_ADAPTORS(double)
template AdaptorParams<double> AdaptorParams<float>::cast<double>() const;
template AdaptorParams<float> AdaptorParams<double>::cast<float>() const;

}  // namespace cpeft
