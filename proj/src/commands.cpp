#include "cpeft/commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cpeft/config_json.hpp"

namespace cpeft {

namespace {

std::size_t layout_numel(const std::vector<std::pair<std::string, Shape>>& layout) {
  std::size_t n = 0;
  for (const auto& [name, shape] : layout) n += shape_numel(shape);
  return n;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string with_commas(std::size_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

DatasetSplits splits_for(const RunConfig& config) {
  return split_dataset(load_examples(config), config.data.split_seed);
}

const std::vector<Example>& pick_split(const DatasetSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

const Example& find_example(const std::vector<Example>& all, std::uint32_t id) {
  for (const auto& ex : all) {
    if (ex.image_id == id) return ex;
  }
  throw ConfigError("no image with id " + std::to_string(id) + " in the dataset");
}

CaptionModel model_from(const std::filesystem::path& checkpoint, const RunConfig& config) {
  return restore_model(load_checkpoint(checkpoint), config.model);
}

}  // namespace

RunConfig resolve_config(const GlobalOptions& options) {
  RunConfig c = options.config_path.empty() ? RunConfig{} : load_run_config(options.config_path);
  c = apply_overrides(c, options.overrides);
  if (options.seed) apply_seed(c, *options.seed);
  c.validate();
  return c;
}

std::vector<Example> load_examples(const RunConfig& config) {
  if (!config.data.path.empty()) return load_dataset(config.data.path);
  return synth_dataset(config.data.n_scenes, config.data.seed, config.data.scene);
}

CountReport count_params(const ModelConfig& model, std::size_t num_contexts) {
  CountReport r;
  auto check = [&](AdaptorSpec spec) {
    spec.num_contexts = num_contexts;
    const std::size_t closed = count_trainable(spec, model);
    const std::size_t enumerated = layout_numel(adaptor_layout(spec, model));
    ++r.matrix_specs;
    if (closed != enumerated) {
      r.mismatches.push_back(to_string(spec.kind) + " r=" + std::to_string(spec.rank) + " " + spec.target_label() +
                             (spec.context_specific ? " specific" : " agnostic") + ": closed form " +
                             std::to_string(closed) + " != enumerated " + std::to_string(enumerated));
    }
    return std::pair{closed, enumerated};
  };

  const std::pair<AdaptorKind, std::size_t> table[] = {
      {AdaptorKind::ia3, 0}, {AdaptorKind::bitfit, 0}, {AdaptorKind::lora, 1}, {AdaptorKind::lora, 8},
      {AdaptorKind::lora, 64}};
  for (const auto& [kind, rank] : table) {
    AdaptorSpec spec;
    spec.kind = kind;
    spec.rank = kind == AdaptorKind::lora ? rank : spec.rank;
    CountRow row;
    row.kind = kind;
    row.rank = rank;
    row.targets = spec.target_label();
    spec.context_specific = false;
    std::tie(row.agnostic_closed, row.agnostic_enumerated) = check(spec);
    spec.context_specific = true;
    std::tie(row.specific_closed, row.specific_enumerated) = check(spec);
    r.rows.push_back(row);
  }

  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    const std::vector<std::size_t> ranks =
        kind == AdaptorKind::lora ? std::vector<std::size_t>{1, 8, 64} : std::vector<std::size_t>{4};
    for (const auto& [att, ffn] : {std::pair{true, false}, std::pair{false, true}, std::pair{true, true}}) {
      for (std::size_t rank : ranks) {
        for (bool specific : {false, true}) {
          AdaptorSpec spec;
          spec.kind = kind;
          spec.rank = rank;
          spec.attention = att;
          spec.ffn = ffn;
          spec.context_specific = specific;
          check(spec);
        }
      }
    }
  }
  r.full_ft = layout_numel(model_layout(model));
  return r;
}

int cmd_count_params(const ModelConfig& model, std::size_t num_contexts, std::ostream& out) {
  const CountReport r = count_params(model, num_contexts);
  out << "model: d_model=" << model.d_model << " layers=" << model.n_layers << " ffn=" << model.d_ffn_fused << "/"
      << model.d_ffn_inner << " contexts=" << num_contexts << "\n";
  char line[200];
  std::snprintf(line, sizeof line, "%-8s %-4s %-7s %14s %14s %14s %14s\n", "adaptor", "rank", "targets",
                "agnostic", "(enumerated)", "specific", "(enumerated)");
  out << line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-8s %-4s %-7s %14s %14s %14s %14s%s\n", to_string(row.kind).c_str(),
                  row.kind == AdaptorKind::lora ? std::to_string(row.rank).c_str() : "-", row.targets.c_str(),
                  with_commas(row.agnostic_closed).c_str(), with_commas(row.agnostic_enumerated).c_str(),
                  with_commas(row.specific_closed).c_str(), with_commas(row.specific_enumerated).c_str(),
                  row.consistent() ? "" : "  MISMATCH");
    out << line;
  }
  out << "full fine-tuning (enumerated): " << with_commas(r.full_ft) << "\n";
  out << "cross-checked " << r.matrix_specs << " specs: ";
  if (r.ok()) {
    out << "closed form matches enumeration\n";
    return 0;
  }
  out << r.mismatches.size() << " mismatches\n";
  for (const auto& m : r.mismatches) out << "  " << m << "\n";
  return 1;
}

void cmd_synth_data(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  const auto examples = synth_dataset(config.data.n_scenes, config.data.seed, config.data.scene);
  const auto path = out_dir / "dataset.cpeft";
  save_dataset(path, examples, {{"run_config", dump_config(config)}});
  if (!examples.empty() && examples.front().scene) {
    write_ppm(render_scene(*examples.front().scene), out_dir / "scene_0.ppm");
  }
  log << "wrote " << examples.size() << " scenes to " << path.string() << "\n";
}

TrainOutputs cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  const DatasetSplits data = splits_for(config);
  if (data.train.empty()) throw ConfigError("dataset too small to train on");
  const std::size_t d_vis = data.train.front().image.d_vis();

  TrainOutputs out;
  out.metrics = out_dir / "metrics.csv";
  out.checkpoint = out_dir / "checkpoint.cpeft";
  std::ofstream metrics(out.metrics);
  if (!metrics) throw Error("cannot write " + out.metrics.string());
  metrics << "# config: " << dump_config(config) << "\n";

  log << "pretraining base LM for " << config.base.pretrain_steps << " steps\n";
  TransformerWeights<float> base = pretrain_base(config.model, config.base, data.train);
  CaptionModel model = config.mode == "full" ? make_full_model(base, d_vis, config.train.seed)
                                             : make_peft_model(base, config.adaptor, d_vis, config.train.seed);
  out.base_hash_before = weights_hash(model.base);
  log << "training " << with_commas(model.trainable_numel()) << " scalars (" << config.mode << ")\n";

  TrainHooks hooks;
  hooks.log = [&](const std::string& line) { metrics << line << "\n"; };
  out.result = train(model, data.train, data.val, config.train, hooks);
  out.base_hash_after = weights_hash(model.base);
  metrics.close();

  for (const auto& e : out.result.history) {
    log << "epoch " << e.epoch << " step " << e.step << " train loss " << fmt(e.train_loss) << " val ppl "
        << fmt(e.val_ppl) << "\n";
  }
  Checkpoint best = out.result.best;
  best.metadata["run_config"] = dump_config(config);
  save_checkpoint(best, out.checkpoint);
  log << "best epoch " << out.result.best_epoch << " (val ppl " << fmt(std::exp(out.result.best_val_nll))
      << "), checkpoint " << out.checkpoint.string() << "\n";
  return out;
}

double cmd_eval(const std::filesystem::path& checkpoint, const RunConfig& config, const std::string& split,
                std::ostream& out) {
  const CaptionModel model = model_from(checkpoint, config);
  const DatasetSplits data = splits_for(config);
  const NllSum nll = evaluate(model, pick_split(data, split));
  out << split << " nll " << fmt(nll.mean()) << " ppl " << fmt(nll.ppl()) << " over " << nll.count << " tokens\n";
  return nll.ppl();
}

HeatmapGrid cmd_heatmap(const std::filesystem::path& checkpoint, const RunConfig& config,
                        std::optional<std::uint32_t> image_id, std::optional<std::size_t> layer,
                        std::optional<std::pair<std::size_t, std::size_t>> span,
                        const std::filesystem::path& out_dir, std::ostream& out) {
  const CaptionModel model = model_from(checkpoint, config);
  const auto examples = load_examples(config);
  const DatasetSplits splits = split_dataset(examples, config.data.split_seed);
  const Example& ex = image_id ? find_example(examples, *image_id) : splits.test.at(0);
  const Example* batch[] = {&ex};
  const auto b = make_batch(model, batch, 0.0, false, nullptr);
  ForwardOptions opts;
  opts.trace = true;
  const auto result = forward(model.base, b.input, model.adaptor_ptr(), opts);

  const std::size_t n = std::min(ex.caption.tokens.size(), kMaxCaptionTokens);
  const auto [s, e] = span.value_or(std::pair{kFirstCaptionPosition, kFirstCaptionPosition + std::max<std::size_t>(n, 1)});
  const std::size_t l = layer.value_or(config.model.n_layers - 1);
  const HeatmapGrid grid = extract_heatmap(result.traces.at(0), l, s, e);

  std::filesystem::create_directories(out_dir);
  const auto stem = out_dir / ("heatmap_img" + std::to_string(ex.image_id) + "_layer" + std::to_string(l));
  std::optional<RgbImage> base;
  if (ex.scene) base = render_scene(*ex.scene);
  export_heatmap(grid, base, stem);
  out << "image " << ex.image_id << " layer " << l << " rows [" << s << ", " << e << ")\n";
  for (std::size_t r = 0; r < kHeatmapSide; ++r) {
    for (std::size_t c = 0; c < kHeatmapSide; ++c) out << (c ? " " : "") << fmt(grid.at(r, c));
    out << "\n";
  }
  out << "wrote " << stem.string() << ".csv" << (base ? " and .ppm" : "") << "\n";
  return grid;
}

std::vector<std::string> cmd_generate(const std::filesystem::path& checkpoint, const RunConfig& config,
                                      const std::filesystem::path& embeddings,
                                      std::optional<std::uint32_t> image_id, std::size_t max_new,
                                      std::ostream& out) {
  const CaptionModel model = model_from(checkpoint, config);
  std::vector<std::pair<std::uint32_t, ImageEmbeddingSet>> images;
  if (!embeddings.empty()) {
    images = load_embeddings(embeddings);
  } else {
    for (const auto& ex : splits_for(config).test) images.emplace_back(ex.image_id, ex.image);
  }
  if (image_id) {
    std::erase_if(images, [&](const auto& p) { return p.first != *image_id; });
    if (images.empty()) throw ConfigError("no image with id " + std::to_string(*image_id));
  }
  std::vector<ImageEmbeddingSet> sets;
  for (const auto& [id, img] : images) sets.push_back(img);
  const auto captions = generate(model, sets, max_new);
  const Vocabulary& vocab = Vocabulary::toy();
  std::vector<std::string> text;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    text.push_back(vocab.detokenize(captions[i]));
    out << "image " << images[i].first << ": " << text.back() << "\n";
  }
  return text;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Context-routed parameter-efficient fine-tuning for captioning"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  app.add_option("--config", g.config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for data, base, init, order and dropout");
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_option("--set", g.overrides, "Override a config field, e.g. --set train.lr=1e-3");
  app.fallthrough();

  auto* train_cmd = app.add_subcommand("train", "Train adaptors (or the full model) on the captioning data");
  auto* eval_cmd = app.add_subcommand("eval", "Perplexity of a checkpoint on a split");
  auto* count_cmd = app.add_subcommand("count-params", "Trainable parameter counts per adaptor family");
  auto* heat_cmd = app.add_subcommand("heatmap", "Attention heatmap of caption rows over image tokens");
  auto* gen_cmd = app.add_subcommand("generate", "Greedy caption generation");
  auto* synth_cmd = app.add_subcommand("synth-data", "Write a synthetic dataset archive");

  std::string checkpoint, split = "test", preset = "config", embeddings, span_text;
  std::uint32_t image_id = 0;
  std::size_t layer = 0, max_new = kMaxCaptionTokens, contexts = 2;
  for (auto* c : {eval_cmd, heat_cmd, gen_cmd}) {
    c->add_option("--checkpoint", checkpoint, "Checkpoint archive")->required()->check(CLI::ExistingFile);
  }
  eval_cmd->add_option("--split", split, "train, val or test")->capture_default_str();
  count_cmd->add_option("--preset", preset, "paper, toy or config")->capture_default_str();
  count_cmd->add_option("--contexts", contexts, "Context groups of the specific variant")->capture_default_str();
  auto* heat_id = heat_cmd->add_option("--image-id", image_id, "Image to trace (default: first test image)");
  auto* heat_layer = heat_cmd->add_option("--layer", layer, "Layer (default: last)");
  auto* heat_span = heat_cmd->add_option("--span", span_text, "Query rows start:end (default: caption)");
  auto* gen_id = gen_cmd->add_option("--image-id", image_id, "Only this image");
  gen_cmd->add_option("--embeddings", embeddings, "Embedding archive (default: test split)");
  gen_cmd->add_option("--max-new", max_new, "Token budget")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (*seed_opt) g.seed = seed;
  g.out = out_dir;

  try {
    RunConfig config = resolve_config(g);
    // Commands that read a checkpoint reuse its recorded config unless told
    // otherwise.
    if (!checkpoint.empty() && !g.customized()) {
      const Checkpoint ckpt = load_checkpoint(checkpoint);
      if (auto it = ckpt.metadata.find("run_config"); it != ckpt.metadata.end()) {
        config = nlohmann::json::parse(it->second).get<RunConfig>();
      }
    }
    if (*train_cmd) {
      cmd_train(config, g.out, std::cout);
    } else if (*eval_cmd) {
      cmd_eval(checkpoint, config, split, std::cout);
    } else if (*count_cmd) {
      ModelConfig m = config.model;
      if (preset == "paper") {
        m = ModelConfig::paper();
      } else if (preset == "toy") {
        m = ModelConfig::toy();
      } else if (preset != "config") {
        throw ConfigError("--preset must be paper, toy or config");
      }
      return cmd_count_params(m, contexts, std::cout);
    } else if (*heat_cmd) {
      std::optional<std::pair<std::size_t, std::size_t>> span;
      if (*heat_span) {
        const auto colon = span_text.find(':');
        if (colon == std::string::npos) throw ConfigError("--span must look like start:end");
        try {
          span = std::pair{static_cast<std::size_t>(std::stoul(span_text.substr(0, colon))),
                           static_cast<std::size_t>(std::stoul(span_text.substr(colon + 1)))};
        } catch (const std::exception&) {
          throw ConfigError("--span must look like start:end");
        }
      }
      cmd_heatmap(checkpoint, config, *heat_id ? std::optional{image_id} : std::nullopt,
                  *heat_layer ? std::optional{layer} : std::nullopt, span, g.out, std::cout);
    } else if (*gen_cmd) {
      cmd_generate(checkpoint, config, embeddings, *gen_id ? std::optional{image_id} : std::nullopt, max_new,
                   std::cout);
    } else if (*synth_cmd) {
      cmd_synth_data(config, g.out, std::cout);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace cpeft
