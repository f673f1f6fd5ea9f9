#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "cpeft/adaptors.hpp"
#include "cpeft/model_config.hpp"
#include "cpeft/pipeline.hpp"
#include "cpeft/training.hpp"
#include "json.hpp"

namespace cpeft {

struct DataConfig {
  // Dataset archive to read; empty means synthesize n_scenes scenes.
  std::string path;
  std::size_t n_scenes = 2000;
  std::uint64_t seed = 7;
  std::uint64_t split_seed = 11;
  SceneConfig scene;
  bool operator==(const DataConfig&) const = default;
};

// Everything a command needs. Files are JSON objects with the same nesting
// as this struct; absent keys keep the defaults below.
struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  AdaptorSpec adaptor;
  TrainConfig train = toy_train_config();
  BaseConfig base;
  DataConfig data;
  std::string mode = "peft";  // "peft" or "full"

  static TrainConfig toy_train_config();
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const BaseConfig& c);
void from_json(const nlohmann::json& j, BaseConfig& c);
void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
// Applies "a.b.c=value" overrides; the value is parsed as JSON when it can
// be, and taken as a string otherwise.
RunConfig apply_overrides(const RunConfig& config, std::span<const std::string> overrides);
// Sets train, base and data seeds from one top-level seed.
void apply_seed(RunConfig& config, std::uint64_t seed);
// Compact single-line JSON with sorted keys.
std::string dump_config(const RunConfig& config);

}  // namespace cpeft
