#pragma once

#include "cpeft/adaptors.hpp"
#include "cpeft/model_config.hpp"
#include "json.hpp"

namespace cpeft {

// Missing keys keep their defaults; unknown keys are rejected with ConfigError.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AdaptorSpec& s);
void from_json(const nlohmann::json& j, AdaptorSpec& s);

}  // namespace cpeft
