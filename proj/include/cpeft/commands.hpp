#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cpeft/heatmap.hpp"
#include "cpeft/run_config.hpp"
#include "cpeft/training.hpp"

namespace cpeft {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "out";
  std::vector<std::string> overrides;  // "a.b=value"

  bool customized() const { return !config_path.empty() || seed || !overrides.empty(); }
};

// Defaults, then the config file, then --set overrides, then --seed.
RunConfig resolve_config(const GlobalOptions& options);

// The configured dataset: loaded from data.path or synthesized.
std::vector<Example> load_examples(const RunConfig& config);

struct CountRow {
  AdaptorKind kind = AdaptorKind::lora;
  std::size_t rank = 0;
  std::string targets;
  std::size_t agnostic_closed = 0, agnostic_enumerated = 0;
  std::size_t specific_closed = 0, specific_enumerated = 0;
  bool consistent() const {
    return agnostic_closed == agnostic_enumerated && specific_closed == specific_enumerated;
  }
};

struct CountReport {
  std::vector<CountRow> rows;        // IA3, BitFit, LoRA r = 1, 8, 64 on AF
  std::size_t full_ft = 0;           // enumerated base scalars
  std::size_t matrix_specs = 0;      // specs cross-checked over the full matrix
  std::vector<std::string> mismatches;
  bool ok() const { return mismatches.empty(); }
};

// Closed-form vs enumerated trainable counts. Enumeration walks the tensor
// layout that attach would allocate.
CountReport count_params(const ModelConfig& model, std::size_t num_contexts);
// Prints the report; returns the process exit code.
int cmd_count_params(const ModelConfig& model, std::size_t num_contexts, std::ostream& out);

void cmd_synth_data(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct TrainOutputs {
  TrainResult result;
  std::filesystem::path metrics, checkpoint;
  std::uint64_t base_hash_before = 0, base_hash_after = 0;
};

// Writes <out>/metrics.csv and <out>/checkpoint.cpeft (best epoch).
TrainOutputs cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

// Perplexity of the checkpoint on a split ("train", "val" or "test").
double cmd_eval(const std::filesystem::path& checkpoint, const RunConfig& config, const std::string& split,
                std::ostream& out);

HeatmapGrid cmd_heatmap(const std::filesystem::path& checkpoint, const RunConfig& config,
                        std::optional<std::uint32_t> image_id, std::optional<std::size_t> layer,
                        std::optional<std::pair<std::size_t, std::size_t>> span,
                        const std::filesystem::path& out_dir, std::ostream& out);

// Captions for images of an embedding archive, or of the configured test
// split when `embeddings` is empty.
std::vector<std::string> cmd_generate(const std::filesystem::path& checkpoint, const RunConfig& config,
                                      const std::filesystem::path& embeddings,
                                      std::optional<std::uint32_t> image_id, std::size_t max_new,
                                      std::ostream& out);

int run_cli(int argc, char** argv);

}  // namespace cpeft
