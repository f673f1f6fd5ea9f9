#include "cpeft/run_config.hpp"

#include <fstream>
#include <set>

#include "cpeft/config_json.hpp"

namespace cpeft {

namespace {

using nlohmann::json;

void check_keys(const json& j, const char* what, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ConfigError(std::string("unknown key '") + key + "' in " + what);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const char* what) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(what) + "." + key + " has the wrong type: " + it->dump());
  }
}

}  // namespace

void to_json(json& j, const ModelConfig& c) {
  j = json{{"d_model", c.d_model},         {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
           {"d_ffn_fused", c.d_ffn_fused}, {"d_ffn_inner", c.d_ffn_inner}, {"vocab_size", c.vocab_size},
           {"max_seq", c.max_seq},         {"rope_base", c.rope_base},   {"rope_abf", c.rope_abf},
           {"rope_abf_base", c.rope_abf_base}, {"dropout_p", c.dropout_p}};
}

void from_json(const json& j, ModelConfig& c) {
  constexpr const char* w = "model";
  check_keys(j, w,
             {"d_model", "n_layers", "n_heads", "d_ffn_fused", "d_ffn_inner", "vocab_size", "max_seq",
              "rope_base", "rope_abf", "rope_abf_base", "dropout_p", "preset"});
  if (auto it = j.find("preset"); it != j.end()) {
    const std::string p = it->is_string() ? it->get<std::string>() : "";
    if (p == "paper") {
      c = ModelConfig::paper();
    } else if (p == "toy") {
      c = ModelConfig::toy();
    } else {
      throw ConfigError("model.preset must be \"paper\" or \"toy\", got " + it->dump());
    }
  }
  read(j, "d_model", c.d_model, w);
  read(j, "n_layers", c.n_layers, w);
  read(j, "n_heads", c.n_heads, w);
  read(j, "d_ffn_fused", c.d_ffn_fused, w);
  read(j, "d_ffn_inner", c.d_ffn_inner, w);
  read(j, "vocab_size", c.vocab_size, w);
  read(j, "max_seq", c.max_seq, w);
  read(j, "rope_base", c.rope_base, w);
  read(j, "rope_abf", c.rope_abf, w);
  read(j, "rope_abf_base", c.rope_abf_base, w);
  read(j, "dropout_p", c.dropout_p, w);
}

void to_json(json& j, const AdaptorSpec& s) {
  j = json{{"kind", to_string(s.kind)},     {"rank", s.rank},
           {"attention", s.attention},      {"ffn", s.ffn},
           {"num_contexts", s.num_contexts}, {"context_specific", s.context_specific}};
}

void from_json(const json& j, AdaptorSpec& s) {
  constexpr const char* w = "adaptor";
  check_keys(j, w, {"kind", "rank", "attention", "ffn", "num_contexts", "context_specific", "targets"});
  std::string kind = to_string(s.kind);
  read(j, "kind", kind, w);
  try {
    s.kind = parse_adaptor_kind(kind);
  } catch (const SpecError& e) {
    throw ConfigError(e.what());
  }
  read(j, "rank", s.rank, w);
  read(j, "attention", s.attention, w);
  read(j, "ffn", s.ffn, w);
  if (auto it = j.find("targets"); it != j.end()) {
    const std::string t = it->is_string() ? it->get<std::string>() : "";
    if (t != "A" && t != "F" && t != "AF") throw ConfigError("adaptor.targets must be A, F or AF");
    s.attention = t.find('A') != std::string::npos;
    s.ffn = t.find('F') != std::string::npos;
  }
  read(j, "num_contexts", s.num_contexts, w);
  read(j, "context_specific", s.context_specific, w);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size}, {"epochs", c.epochs},       {"lr", c.lr},
           {"beta1", c.beta1},           {"beta2", c.beta2},         {"adam_eps", c.adam_eps},
           {"dropout_p", c.dropout_p},   {"seed", c.seed},           {"eval_every", c.eval_every},
           {"max_steps", c.max_steps},   {"stop_ratio", c.stop_ratio}, {"stop_window", c.stop_window},
           {"warmup_steps", c.warmup_steps}, {"lr_schedule", c.lr_schedule}};
}

void from_json(const json& j, TrainConfig& c) {
  constexpr const char* w = "train";
  check_keys(j, w,
             {"batch_size", "epochs", "lr", "beta1", "beta2", "adam_eps", "dropout_p", "seed", "eval_every",
              "max_steps", "stop_ratio", "stop_window", "warmup_steps", "lr_schedule"});
  read(j, "batch_size", c.batch_size, w);
  read(j, "epochs", c.epochs, w);
  read(j, "lr", c.lr, w);
  read(j, "beta1", c.beta1, w);
  read(j, "beta2", c.beta2, w);
  read(j, "adam_eps", c.adam_eps, w);
  read(j, "dropout_p", c.dropout_p, w);
  read(j, "seed", c.seed, w);
  read(j, "eval_every", c.eval_every, w);
  read(j, "max_steps", c.max_steps, w);
  read(j, "stop_ratio", c.stop_ratio, w);
  read(j, "stop_window", c.stop_window, w);
  read(j, "warmup_steps", c.warmup_steps, w);
  read(j, "lr_schedule", c.lr_schedule, w);
}

void to_json(json& j, const BaseConfig& c) {
  j = json{{"seed", c.seed}, {"pretrain_steps", c.pretrain_steps}, {"lr", c.lr}, {"batch_size", c.batch_size}};
}

void from_json(const json& j, BaseConfig& c) {
  constexpr const char* w = "base";
  check_keys(j, w, {"seed", "pretrain_steps", "lr", "batch_size"});
  read(j, "seed", c.seed, w);
  read(j, "pretrain_steps", c.pretrain_steps, w);
  read(j, "lr", c.lr, w);
  read(j, "batch_size", c.batch_size, w);
}

void to_json(json& j, const SceneConfig& c) {
  j = json{{"grid_rows", c.grid_rows},   {"grid_cols", c.grid_cols}, {"num_colors", c.num_colors},
           {"num_shapes", c.num_shapes}, {"d_vis", c.d_vis}};
}

void from_json(const json& j, SceneConfig& c) {
  constexpr const char* w = "data.scene";
  check_keys(j, w, {"grid_rows", "grid_cols", "num_colors", "num_shapes", "d_vis"});
  read(j, "grid_rows", c.grid_rows, w);
  read(j, "grid_cols", c.grid_cols, w);
  read(j, "num_colors", c.num_colors, w);
  read(j, "num_shapes", c.num_shapes, w);
  read(j, "d_vis", c.d_vis, w);
}

void to_json(json& j, const DataConfig& c) {
  j = json{{"path", c.path}, {"n_scenes", c.n_scenes}, {"seed", c.seed}, {"split_seed", c.split_seed},
           {"scene", c.scene}};
}

void from_json(const json& j, DataConfig& c) {
  constexpr const char* w = "data";
  check_keys(j, w, {"path", "n_scenes", "seed", "split_seed", "scene"});
  read(j, "path", c.path, w);
  read(j, "n_scenes", c.n_scenes, w);
  read(j, "seed", c.seed, w);
  read(j, "split_seed", c.split_seed, w);
  if (auto it = j.find("scene"); it != j.end()) from_json(*it, c.scene);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model}, {"adaptor", c.adaptor}, {"train", c.train},
           {"base", c.base},   {"data", c.data},       {"mode", c.mode}};
}

void from_json(const json& j, RunConfig& c) {
  check_keys(j, "config", {"model", "adaptor", "train", "base", "data", "mode"});
  if (auto it = j.find("model"); it != j.end()) from_json(*it, c.model);
  if (auto it = j.find("adaptor"); it != j.end()) from_json(*it, c.adaptor);
  if (auto it = j.find("train"); it != j.end()) from_json(*it, c.train);
  if (auto it = j.find("base"); it != j.end()) from_json(*it, c.base);
  if (auto it = j.find("data"); it != j.end()) from_json(*it, c.data);
  read(j, "mode", c.mode, "config");
}

TrainConfig RunConfig::toy_train_config() {
  TrainConfig t;
  t.batch_size = 4;
  t.epochs = 5;
  t.max_steps = 2000;
  t.lr = 3e-3;
  return t;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.scene.validate();
  if (mode != "peft" && mode != "full") throw ConfigError("mode must be \"peft\" or \"full\", got \"" + mode + "\"");
  if (mode == "peft") {
    try {
      adaptor.validate(model);
    } catch (const SpecError& e) {
      throw ConfigError(e.what());
    }
  }
  if (data.path.empty() && data.n_scenes == 0) throw ConfigError("data.n_scenes must be positive");
  if (base.batch_size == 0) throw ConfigError("base.batch_size must be positive");
  if (Vocabulary::toy().size() > model.vocab_size) {
    throw ConfigError("model.vocab_size " + std::to_string(model.vocab_size) + " is smaller than the " +
                      std::to_string(Vocabulary::toy().size()) + "-word caption vocabulary");
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

RunConfig apply_overrides(const RunConfig& config, std::span<const std::string> overrides) {
  json j = config;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form key=value");
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json::json_pointer ptr;
    std::size_t start = 0;
    while (start <= key.size()) {
      const auto dot = key.find('.', start);
      ptr /= key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (!j.contains(ptr.parent_pointer()) || !j.at(ptr.parent_pointer()).is_object()) {
      throw ConfigError("override '" + o + "' names an unknown section");
    }
    j[ptr] = value;
  }
  RunConfig out;
  from_json(j, out);
  return out;
}

void apply_seed(RunConfig& config, std::uint64_t seed) {
  config.train.seed = seed;
  config.base.seed = derive_seed(seed, 501);
  config.data.seed = derive_seed(seed, 502);
  config.data.split_seed = derive_seed(seed, 503);
}

std::string dump_config(const RunConfig& config) { return json(config).dump(); }

}  // namespace cpeft
