#include "cpeft/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "cpeft/archive.hpp"
#include "cpeft/config_json.hpp"

namespace cpeft {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor normal_tensor(Shape shape, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::from(std::move(shape), std::move(v));
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw LoadError("checkpoint tensor '" + name + "' has shape " + shape_string(src.shape()) +
                    ", expected " + shape_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

const Tensor& find_tensor(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& [n, t] : ckpt.tensors) {
    if (n == name) return t;
  }
  throw LoadError("checkpoint is missing tensor '" + name + "'");
}

const std::string& find_meta(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.metadata.find(key);
  if (it == ckpt.metadata.end()) throw LoadError("checkpoint is missing metadata '" + key + "'");
  return it->second;
}

std::vector<Tensor> tensors_of(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [n, t] : named) out.push_back(t);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a finite non-negative number");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("train.dropout_p must lie in [0, 1)");
  if (stop_ratio < 0.0) throw ConfigError("train.stop_ratio must be non-negative");
  if (stop_ratio > 0.0 && stop_window == 0) throw ConfigError("train.stop_window must be positive");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw ConfigError("train.lr_schedule must be \"constant\" or \"cosine\", got \"" + lr_schedule + "\"");
  }
}

double scheduled_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (step < config.warmup_steps) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  if (config.lr_schedule != "cosine" || total_steps <= config.warmup_steps) return config.lr;
  const double t = static_cast<double>(step - config.warmup_steps) /
                   static_cast<double>(total_steps - config.warmup_steps);
  return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

void adam_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& config) {
  if (state.moments.empty()) {
    for (const auto& p : params) state.moments.push_back({std::vector<float>(p.numel()), std::vector<float>(p.numel())});
  }
  if (state.moments.size() != params.size()) {
    throw TrainingError("optimizer state tracks " + std::to_string(state.moments.size()) +
                        " tensors but " + std::to_string(params.size()) + " were passed");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw TrainingError("trainable tensor " + std::to_string(i) + " " + shape_string(params[i].shape()) +
                          " has no gradient");
    }
  }
  state.t += 1;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.moments[i].m;
    auto& v = state.moments[i].v;
    if (m.size() != w.size()) throw TrainingError("optimizer moment size mismatch");
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<float>(w[j] - config.lr * mhat / (std::sqrt(vhat) + config.adam_eps));
    }
  }
}

std::vector<std::pair<std::string, Tensor>> CaptionModel::trainable() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (mode == TrainMode::full) {
    for (auto& [n, t] : base.named_tensors()) out.emplace_back("base/" + n, t);
  } else if (adaptors) {
    for (auto& [n, t] : adaptors->named_tensors()) out.emplace_back("adaptor/" + n, t);
  }
  out.emplace_back("projection", projection);
  return out;
}

std::size_t CaptionModel::trainable_numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable()) n += t.numel();
  return n;
}

CaptionModel make_peft_model(TransformerWeights<float> base, const AdaptorSpec& spec, std::size_t d_vis,
                             std::uint64_t seed) {
  CaptionModel m;
  base.set_trainable(false);
  m.adaptors = attach(spec, base.config, derive_seed(seed, 1));
  m.projection = normal_tensor({d_vis, base.config.d_model}, 0.02, derive_seed(seed, 2));
  m.projection.set_requires_grad(true);
  m.base = std::move(base);
  m.mode = TrainMode::peft;
  return m;
}

CaptionModel make_full_model(TransformerWeights<float> base, std::size_t d_vis, std::uint64_t seed) {
  CaptionModel m;
  base.set_trainable(true);
  m.projection = normal_tensor({d_vis, base.config.d_model}, 0.02, derive_seed(seed, 2));
  m.projection.set_requires_grad(true);
  m.base = std::move(base);
  m.mode = TrainMode::full;
  return m;
}

TrainingBatch make_batch(const CaptionModel& model, std::span<const Example* const> batch, double dropout_p,
                         bool training, Rng* rng) {
  std::vector<SequenceLayout> layouts;
  std::vector<Tensor> blocks;
  layouts.reserve(batch.size());
  blocks.reserve(batch.size());
  for (const Example* ex : batch) {
    layouts.push_back(make_layout(ex->caption));
    blocks.push_back(project_images(ex->image.embeddings, model.projection, dropout_p, training, rng));
  }
  TrainingBatch out;
  out.input = make_input<float>(layouts, concat_rows<float>(blocks));
  for (const auto& l : layouts) {
    out.targets.insert(out.targets.end(), l.targets.begin(), l.targets.end());
    out.loss_mask.insert(out.loss_mask.end(), l.loss_mask.begin(), l.loss_mask.end());
  }
  return out;
}

double NllSum::mean() const {
  if (count == 0) throw EvaluationError("no masked positions to average over");
  return nll / static_cast<double>(count);
}

double NllSum::ppl() const { return std::exp(mean()); }

NllSum masked_nll(const Tensor& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  if (mask.size() != targets.size()) throw DimensionError("masked_nll: mask and targets differ in length");
  const auto nll = token_nll(logits, targets);
  NllSum out;
  for (std::size_t i = 0; i < nll.size(); ++i) {
    if (mask[i]) {
      out.nll += nll[i];
      out.count += 1;
    }
  }
  return out;
}

NllSum evaluate(const CaptionModel& model, std::span<const Example> split, std::size_t batch_size) {
  if (split.empty()) throw EvaluationError("cannot evaluate an empty split");
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  NllSum total;
  std::vector<const Example*> batch;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    batch.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) batch.push_back(&split[i]);
    const auto b = make_batch(model, batch, 0.0, false, nullptr);
    const auto result = forward(model.base, b.input, model.adaptor_ptr());
    const auto part = masked_nll(result.logits, b.targets, b.loss_mask);
    total.nll += part.nll;
    total.count += part.count;
  }
  return total;
}

double perplexity(const CaptionModel& model, std::span<const Example> split, std::size_t batch_size) {
  return evaluate(model, split, batch_size).ppl();
}

Checkpoint make_checkpoint(const CaptionModel& model, const OptimizerState& optimizer,
                           std::map<std::string, std::string> metadata) {
  Checkpoint c;
  c.metadata = std::move(metadata);
  c.metadata["kind"] = "checkpoint";
  c.metadata["mode"] = model.mode == TrainMode::full ? "full" : "peft";
  c.metadata["model_config"] = nlohmann::json(model.base.config).dump();
  if (model.adaptors) c.metadata["adaptor_spec"] = nlohmann::json(model.adaptors->spec).dump();
  c.metadata["optimizer_step"] = std::to_string(optimizer.t);
  for (const auto& [n, t] : model.base.named_tensors()) c.tensors.emplace_back("base/" + n, t.detach());
  if (model.adaptors) {
    for (const auto& [n, t] : model.adaptors->named_tensors()) c.tensors.emplace_back("adaptor/" + n, t.detach());
  }
  c.tensors.emplace_back("projection", model.projection.detach());
  const auto names = model.trainable();
  for (std::size_t i = 0; i < optimizer.moments.size() && i < names.size(); ++i) {
    const Shape& shape = names[i].second.shape();
    c.tensors.emplace_back("optim/" + names[i].first + "/m", Tensor::from(shape, optimizer.moments[i].m));
    c.tensors.emplace_back("optim/" + names[i].first + "/v", Tensor::from(shape, optimizer.moments[i].v));
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  TensorArchive archive;
  archive.metadata = checkpoint.metadata;
  for (const auto& [n, t] : checkpoint.tensors) archive.add(n, t);
  write_archive(path, archive);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorArchive archive;
  try {
    archive = read_archive(path);
  } catch (const FormatError& e) {
    throw LoadError(std::string("cannot load checkpoint: ") + e.what());
  }
  Checkpoint c;
  c.metadata = archive.metadata;
  if (find_meta(c, "kind") != "checkpoint") throw LoadError("archive " + path.string() + " is not a checkpoint");
  c.tensors = archive.entries();
  return c;
}

CaptionModel restore_model(const Checkpoint& checkpoint, const std::optional<ModelConfig>& expected) {
  ModelConfig cfg;
  AdaptorSpec spec;
  try {
    cfg = nlohmann::json::parse(find_meta(checkpoint, "model_config")).get<ModelConfig>();
    if (checkpoint.metadata.count("adaptor_spec")) {
      spec = nlohmann::json::parse(checkpoint.metadata.at("adaptor_spec")).get<AdaptorSpec>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint config is corrupt: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint config is corrupt: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw LoadError("checkpoint model config " + find_meta(checkpoint, "model_config") +
                    " does not match the current config " + nlohmann::json(*expected).dump());
  }
  const bool full = find_meta(checkpoint, "mode") == "full";
  TransformerWeights<float> base = init_model(cfg, 0);
  for (auto& [n, t] : base.named_tensors()) {
    Tensor dst = t;
    copy_into(dst, find_tensor(checkpoint, "base/" + n), "base/" + n);
  }
  const Tensor& proj = find_tensor(checkpoint, "projection");
  if (proj.rank() != 2 || proj.dim(1) != cfg.d_model) {
    throw LoadError("checkpoint projection has shape " + shape_string(proj.shape()));
  }
  CaptionModel m = full ? make_full_model(std::move(base), proj.dim(0), 0)
                        : make_peft_model(std::move(base), spec, proj.dim(0), 0);
  copy_into(m.projection, proj, "projection");
  if (m.adaptors) {
    for (auto& [n, t] : m.adaptors->named_tensors()) {
      Tensor dst = t;
      copy_into(dst, find_tensor(checkpoint, "adaptor/" + n), "adaptor/" + n);
    }
  }
  return m;
}

TrainResult train(CaptionModel& model, std::span<const Example> train_split, std::span<const Example> val_split,
                  const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (train_split.empty()) throw TrainingError("training split is empty");
  if (val_split.empty()) throw TrainingError("validation split is empty");
  auto log = [&](const std::string& line) {
    if (hooks.log) hooks.log(line);
  };

  const auto named = model.trainable();
  std::vector<Tensor> params = tensors_of(named);
  OptimizerState optimizer;
  TransformerWeights<float> weights = model.base;
  weights.config.dropout_p = config.dropout_p;

  TrainResult result;
  log(kMetricsHeader);
  std::vector<std::size_t> order(train_split.size());
  std::vector<const Example*> batch;
  const std::size_t batches = (train_split.size() + config.batch_size - 1) / config.batch_size;
  std::size_t total_steps = batches * config.epochs;
  if (config.max_steps) total_steps = std::min(total_steps, config.max_steps);
  TrainConfig step_config = config;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(config.seed, 100 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle.engine());

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    bool budget_hit = false;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) {
        budget_hit = true;
        break;
      }
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(&train_split[order[i]]);
      }
      Rng rng(derive_seed(config.seed, 1'000'000 + step));
      double loss_value = 0.0;
      {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        const auto b = make_batch(model, batch, config.dropout_p, true, &rng);
        ForwardOptions opts;
        opts.training = true;
        opts.rng = &rng;
        const auto out = forward(weights, b.input, model.adaptor_ptr(), opts);
        const Tensor loss = masked_cross_entropy(out.logits, b.targets, b.loss_mask);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          std::string ids;
          for (const Example* ex : batch) ids += (ids.empty() ? "" : " ") + std::to_string(ex->image_id);
          throw TrainingError("non-finite loss " + fmt(loss_value) + " at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step + 1) + "; batch image ids: " + ids);
        }
        for (auto& p : params) p.zero_grad();
        tape.backward(loss);
      }
      step_config.lr = scheduled_lr(config, step, total_steps);
      adam_step(params, optimizer, step_config);
      ++step;
      ++epoch_steps;
      epoch_loss += loss_value;
      result.step_losses.push_back(loss_value);
      log("step," + std::to_string(epoch) + "," + std::to_string(step) + "," + fmt(loss_value) + ",");

      if (config.eval_every && step % config.eval_every == 0) {
        const NllSum val = evaluate(model, val_split);
        log("eval," + std::to_string(epoch) + "," + std::to_string(step) + "," + fmt(val.mean()) + "," +
            fmt(val.ppl()));
      }
      if (config.stop_ratio > 0.0 && result.step_losses.size() >= config.stop_window) {
        const auto& s = result.step_losses;
        const double first = std::accumulate(s.begin(), s.begin() + config.stop_window, 0.0);
        const double last = std::accumulate(s.end() - config.stop_window, s.end(), 0.0);
        if (last <= config.stop_ratio * first) {
          result.stopped_early = true;
          break;
        }
      }
    }
    if (epoch_steps == 0) break;

    const NllSum val = evaluate(model, val_split);
    EpochMetrics em{epoch, step, epoch_loss / static_cast<double>(epoch_steps), val.mean(), val.ppl()};
    result.history.push_back(em);
    log("epoch," + std::to_string(epoch) + "," + std::to_string(step) + "," + fmt(em.train_loss) + "," +
        fmt(em.val_ppl));
    if (result.history.size() == 1 || em.val_nll < result.best_val_nll) {
      result.best_epoch = epoch;
      result.best_val_nll = em.val_nll;
      result.best = make_checkpoint(model, optimizer,
                                    {{"epoch", std::to_string(epoch)},
                                     {"step", std::to_string(step)},
                                     {"val_nll", fmt_exact(em.val_nll)},
                                     {"val_ppl", fmt_exact(em.val_ppl)}});
    }
    if (result.stopped_early || budget_hit) break;
  }
  return result;
}

TransformerWeights<float> pretrain_base(const ModelConfig& model_config, const BaseConfig& config,
                                        std::span<const Example> examples) {
  model_config.validate();
  TransformerWeights<float> w = init_model(model_config, config.seed);
  if (config.pretrain_steps == 0) return w;
  if (examples.empty()) throw TrainingError("base pretraining needs at least one caption");
  if (config.batch_size == 0) throw ConfigError("base.batch_size must be positive");
  w.set_trainable(true);
  std::vector<Tensor> params = tensors_of(w.named_tensors());
  OptimizerState optimizer;
  TrainConfig adam;
  adam.lr = config.lr;
  Rng pick(derive_seed(config.seed, 7));
  for (std::size_t step = 0; step < config.pretrain_steps; ++step) {
    std::vector<SequenceLayout> layouts;
    std::vector<TokenId> targets;
    std::vector<std::uint8_t> mask;
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      layouts.push_back(make_layout(examples[pick.below(examples.size())].caption));
      targets.insert(targets.end(), layouts.back().targets.begin(), layouts.back().targets.end());
      mask.insert(mask.end(), layouts.back().loss_mask.begin(), layouts.back().loss_mask.end());
    }
    Tape<float> tape;
    TapeScope<float> scope(tape);
    const auto input = make_input<float>(layouts, Tensor{});
    const auto out = forward(w, input);
    const Tensor loss = masked_cross_entropy(out.logits, targets, mask);
    if (!std::isfinite(loss.item())) throw TrainingError("non-finite loss during base pretraining");
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);
    adam_step(params, optimizer, adam);
  }
  w.set_trainable(false);
  return w;
}

std::vector<std::vector<TokenId>> generate(const CaptionModel& model, std::span<const ImageEmbeddingSet> images,
                                           std::size_t max_new) {
  std::vector<std::vector<TokenId>> out(images.size());
  if (images.empty() || max_new == 0) return out;
  std::vector<Tensor> blocks;
  for (const auto& img : images) {
    blocks.push_back(project_images(img.embeddings, model.projection, 0.0, false, nullptr));
  }
  const Tensor block = concat_rows<float>(blocks);
  std::vector<bool> done(images.size(), false);
  const std::size_t budget = std::min(max_new, kMaxCaptionTokens);
  const std::size_t vocab = model.base.config.vocab_size;
  // Rows past the word list only pad the embedding table.
  const std::size_t words = std::min(vocab, Vocabulary::toy().size());
  for (std::size_t k = 0; k < budget; ++k) {
    std::vector<SequenceLayout> layouts;
    for (const auto& toks : out) layouts.push_back(make_layout({0, toks}));
    const auto result = forward(model.base, make_input<float>(layouts, block), model.adaptor_ptr());
    const auto logits = result.logits.data();
    bool any = false;
    for (std::size_t b = 0; b < images.size(); ++b) {
      if (done[b]) continue;
      const std::size_t row = b * kSequenceLength + kImageTokens + k;
      const auto first = logits.begin() + static_cast<std::ptrdiff_t>(row * vocab);
      const auto best = static_cast<TokenId>(std::max_element(first, first + static_cast<std::ptrdiff_t>(words)) - first);
      if (best == kEosToken) {
        done[b] = true;
      } else {
        out[b].push_back(best);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

}  // namespace cpeft
