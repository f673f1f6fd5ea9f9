#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpeft/adaptors.hpp"
#include "cpeft/pipeline.hpp"
#include "cpeft/tensor.hpp"
#include "cpeft/transformer.hpp"

namespace cpeft {

struct TrainConfig {
  std::size_t batch_size = 96;
  std::size_t epochs = 8;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double dropout_p = 0.1;
  std::uint64_t seed = 0;
  // Extra validation passes every this many steps (0: only at epoch ends).
  std::size_t eval_every = 0;
  // Hard step budget across epochs (0: none).
  std::size_t max_steps = 0;
  // Stop once the mean of the last `stop_window` step losses is at most
  // stop_ratio times the mean of the first `stop_window` (0: never).
  double stop_ratio = 0.0;
  std::size_t stop_window = 20;
  // Linear warmup from 0, then "constant" or "cosine" decay to 0 at the last step.
  std::size_t warmup_steps = 0;
  std::string lr_schedule = "constant";

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Learning rate for the 0-based `step` of a run lasting `total_steps`.
double scheduled_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps);

struct ParamMoments {
  std::vector<float> m, v;
};

struct OptimizerState {
  std::vector<ParamMoments> moments;  // one per trainable tensor, same order
  std::uint64_t t = 0;
};

// Bias-corrected Adam over `params`, reading their gradient buffers. Throws
// TrainingError when a parameter has no gradient.
void adam_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& config);

enum class TrainMode { peft, full };

// Frozen (or, in full mode, trainable) language model plus everything a
// captioning run trains.
struct CaptionModel {
  TransformerWeights<float> base;
  std::optional<AdaptorParams<float>> adaptors;  // empty in full mode
  Tensor projection;                             // [d_vis, d_model]
  TrainMode mode = TrainMode::peft;

  // Trainable tensors in a stable order with archive names.
  std::vector<std::pair<std::string, Tensor>> trainable() const;
  std::size_t trainable_numel() const;
  const AdaptorParams<float>* adaptor_ptr() const { return adaptors ? &*adaptors : nullptr; }
};

// PEFT model: frozen base, fresh adaptors and a N(0, 0.02) projection.
CaptionModel make_peft_model(TransformerWeights<float> base, const AdaptorSpec& spec,
                             std::size_t d_vis, std::uint64_t seed);
// Full fine-tuning baseline: every base tensor and the projection train.
CaptionModel make_full_model(TransformerWeights<float> base, std::size_t d_vis, std::uint64_t seed);

struct TrainingBatch {
  ModelInput<float> input;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> loss_mask;
};

// Model input, targets and loss mask for a batch of examples.
TrainingBatch make_batch(const CaptionModel& model, std::span<const Example* const> batch,
                         double dropout_p, bool training, Rng* rng);

struct NllSum {
  double nll = 0.0;
  std::size_t count = 0;
  double mean() const;
  double ppl() const;
};

// Summed NLL over masked rows of logits [N, V].
NllSum masked_nll(const Tensor& logits, std::span<const TokenId> targets,
                  std::span<const std::uint8_t> mask);

// Aggregate NLL of a split in eval mode. Throws EvaluationError when empty.
NllSum evaluate(const CaptionModel& model, std::span<const Example> split, std::size_t batch_size = 16);
double perplexity(const CaptionModel& model, std::span<const Example> split,
                  std::size_t batch_size = 16);

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

// Snapshot of the model and optimizer. Base weights are stored too, so a
// checkpoint is self-contained.
Checkpoint make_checkpoint(const CaptionModel& model, const OptimizerState& optimizer,
                           std::map<std::string, std::string> metadata);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Rebuilds a model; throws LoadError when the stored model config differs
// from `expected` (when given) or tensors are missing or misshapen.
CaptionModel restore_model(const Checkpoint& checkpoint,
                           const std::optional<ModelConfig>& expected = std::nullopt);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_nll = 0.0;
  double val_ppl = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;
  double best_val_nll = 0.0;
  Checkpoint best;
  bool stopped_early = false;
};

struct TrainHooks {
  // Receives every metrics line (without trailing newline).
  std::function<void(const std::string&)> log;
};

inline constexpr const char* kMetricsHeader = "kind,epoch,step,loss,ppl";

// Adam on the model's trainable tensors. Data order, dropout masks and
// initialization are all derived from config.seed. Throws TrainingError on a
// non-finite loss.
TrainResult train(CaptionModel& model, std::span<const Example> train_split,
                  std::span<const Example> val_split, const TrainConfig& config,
                  const TrainHooks& hooks = {});

struct BaseConfig {
  std::uint64_t seed = 1234;
  std::size_t pretrain_steps = 300;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  bool operator==(const BaseConfig&) const = default;
};

// Text-only language-model training of a fresh base on the captions, image
// positions holding the [IMG] embedding. The result is frozen.
TransformerWeights<float> pretrain_base(const ModelConfig& model_config, const BaseConfig& config,
                                        std::span<const Example> examples);

// Greedy captions for each image block, decoding from the last image position
// until [EOS] or max_new tokens.
std::vector<std::vector<TokenId>> generate(const CaptionModel& model,
                                           std::span<const ImageEmbeddingSet> images,
                                           std::size_t max_new);

}  // namespace cpeft
