#include "cpeft/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cpeft/archive.hpp"

namespace cpeft {

namespace {

const std::vector<std::string> kColors = {"red",   "green", "blue", "yellow", "purple",
                                          "orange", "white", "black", "pink",  "brown"};
const std::vector<std::string> kShapes = {"circle", "square", "triangle", "star",
                                          "cross",  "heart",  "diamond",  "ring"};
const std::vector<std::string> kFunctionWords = {
    "a",     "an",    "the",    "and",   "with",   "of",     "on",    "in",    "at",   "is",
    "are",   "there", "image",  "picture", "scene", "shows", "left",  "right", "top",  "bottom",
    "upper", "lower", "middle", "center", "small", "large",  "big",   "tiny",  "one",  "two",
    "three", "four",  "next",   "to",    "above",  "below",  "beside", "near"};

const std::array<std::array<std::uint8_t, 3>, 10> kColorRgb = {{{220, 40, 40},
                                                                {40, 170, 60},
                                                                {40, 80, 220},
                                                                {235, 215, 40},
                                                                {140, 60, 180},
                                                                {245, 140, 30},
                                                                {250, 250, 250},
                                                                {20, 20, 20},
                                                                {245, 150, 190},
                                                                {130, 80, 40}}};

constexpr std::uint64_t kEncoderSeed = 0x5EEDC0DEULL;

struct Codebook {
  std::vector<std::vector<float>> color, shape, patch;
};

Codebook make_codebook(std::size_t d_vis) {
  Rng rng(kEncoderSeed + d_vis);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d_vis));
  auto draw = [&](std::size_t count) {
    std::vector<std::vector<float>> out(count, std::vector<float>(d_vis));
    for (auto& v : out)
      for (auto& x : v) x = static_cast<float>(rng.normal(0.0, sd));
    return out;
  };
  Codebook cb;
  cb.color = draw(kColors.size());
  cb.shape = draw(kShapes.size());
  cb.patch = draw(kImageTokens);
  return cb;
}

ImageEmbeddingSet embed_with(const SyntheticScene& scene, const Codebook& cb, std::size_t d_vis) {
  std::vector<float> data(kImageTokens * d_vis);
  for (std::size_t p = 0; p < kImageTokens; ++p) {
    const std::size_t pr = p / kHeatmapSide, pc = p % kHeatmapSide;
    const std::size_t cell = (pr * scene.rows / kHeatmapSide) * scene.cols + pc * scene.cols / kHeatmapSide;
    const auto& c = scene.cells[cell];
    for (std::size_t j = 0; j < d_vis; ++j) {
      data[p * d_vis + j] = cb.color[c.color][j] + cb.shape[c.shape][j] + 0.5f * cb.patch[p][j];
    }
  }
  return {Tensor::from({kImageTokens, d_vis}, std::move(data))};
}

std::string image_key(std::uint32_t id) { return "image/" + std::to_string(id); }

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!ids_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw ConfigError("vocabulary: duplicate word '" + words_[i] + "'");
    }
  }
}

const Vocabulary& Vocabulary::toy() {
  static const Vocabulary vocab = [] {
    std::vector<std::string> w = {"[PAD]", "[BOS]", "[EOS]", "[IMG]"};
    w.insert(w.end(), kColors.begin(), kColors.end());
    w.insert(w.end(), kShapes.begin(), kShapes.end());
    w.insert(w.end(), kFunctionWords.begin(), kFunctionWords.end());
    return Vocabulary(std::move(w));
  }();
  return vocab;
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw FormatError("vocabulary: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw FormatError("vocabulary: token id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::tokenize(const std::string& text) const {
  std::istringstream in(text);
  std::vector<TokenId> out;
  for (std::string w; in >> w;) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

const std::vector<std::string>& color_words() { return kColors; }
const std::vector<std::string>& shape_words() { return kShapes; }

void SceneConfig::validate() const {
  if (grid_rows == 0 || grid_cols == 0 || kHeatmapSide % grid_rows != 0 || kHeatmapSide % grid_cols != 0) {
    throw ConfigError("scene config: grid dimensions must divide 8");
  }
  if (num_colors == 0 || num_colors > kColors.size()) throw ConfigError("scene config: num_colors out of range");
  if (num_shapes == 0 || num_shapes > kShapes.size()) throw ConfigError("scene config: num_shapes out of range");
  if (d_vis == 0) throw ConfigError("scene config: d_vis must be positive");
}

std::string SyntheticScene::caption() const {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += " and ";
    out += kColors[cells[i].color] + " " + kShapes[cells[i].shape];
  }
  return out;
}

ImageEmbeddingSet SyntheticScene::embed(std::size_t d_vis) const {
  return embed_with(*this, make_codebook(d_vis), d_vis);
}

std::string SyntheticScene::encode() const {
  std::string out = std::to_string(rows) + "x" + std::to_string(cols) + ":";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(cells[i].color) + "." + std::to_string(cells[i].shape);
  }
  return out;
}

SyntheticScene SyntheticScene::decode(const std::string& text) {
  SyntheticScene s;
  char x = 0, colon = 0;
  std::istringstream in(text);
  if (!(in >> s.rows >> x >> s.cols >> colon) || x != 'x' || colon != ':' || s.rows == 0 || s.cols == 0) {
    throw FormatError("scene code '" + text + "' is malformed");
  }
  for (std::size_t i = 0; i < s.rows * s.cols; ++i) {
    unsigned color = 0, shape = 0;
    char dot = 0, comma = 0;
    if (i && (!(in >> comma) || comma != ',')) throw FormatError("scene code '" + text + "' is malformed");
    if (!(in >> color >> dot >> shape) || dot != '.' || color >= kColors.size() || shape >= kShapes.size()) {
      throw FormatError("scene code '" + text + "' is malformed");
    }
    s.cells.push_back({static_cast<std::uint8_t>(shape), static_cast<std::uint8_t>(color)});
  }
  return s;
}

std::vector<Example> synth_dataset(std::size_t n, std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  if (n == 0) throw ConfigError("synth_dataset: n must be at least 1");
  const Codebook cb = make_codebook(config.d_vis);
  const Vocabulary& vocab = Vocabulary::toy();
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticScene scene;
    scene.rows = config.grid_rows;
    scene.cols = config.grid_cols;
    for (std::size_t c = 0; c < config.grid_rows * config.grid_cols; ++c) {
      SceneCell cell;
      cell.color = static_cast<std::uint8_t>(rng.below(config.num_colors));
      cell.shape = static_cast<std::uint8_t>(rng.below(config.num_shapes));
      scene.cells.push_back(cell);
    }
    Example ex;
    ex.image_id = static_cast<std::uint32_t>(i);
    ex.image = embed_with(scene, cb, config.d_vis);
    ex.caption = {ex.image_id, vocab.tokenize(scene.caption())};
    ex.scene = std::move(scene);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::pair<std::uint32_t, ImageEmbeddingSet>> load_embeddings(
    const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  std::vector<std::pair<std::uint32_t, ImageEmbeddingSet>> out;
  for (const auto& [name, t] : archive.entries()) {
    if (name.rfind("image/", 0) != 0) continue;
    std::uint32_t id = 0;
    try {
      id = static_cast<std::uint32_t>(std::stoul(name.substr(6)));
    } catch (const std::exception&) {
      throw FormatError("embedding archive: record '" + name + "' has a non-numeric image id");
    }
    if (t.rank() != 2 || t.dim(0) != kImageTokens) {
      throw FormatError("embedding archive: record '" + name + "' has shape " + shape_string(t.shape()) +
                        ", expected [64, d_vis]");
    }
    for (float v : t.data()) {
      if (!std::isfinite(v)) throw FormatError("embedding archive: record '" + name + "' is not finite");
    }
    out.emplace_back(id, ImageEmbeddingSet{t});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

void save_embeddings(const std::filesystem::path& path,
                     std::span<const std::pair<std::uint32_t, ImageEmbeddingSet>> images) {
  TensorArchive archive;
  archive.metadata["kind"] = "embeddings";
  for (const auto& [id, img] : images) archive.add(image_key(id), img.embeddings);
  write_archive(path, archive);
}

void save_dataset(const std::filesystem::path& path, std::span<const Example> examples,
                  const std::map<std::string, std::string>& extra_metadata) {
  TensorArchive archive;
  archive.metadata = extra_metadata;
  archive.metadata["kind"] = "dataset";
  const Vocabulary& vocab = Vocabulary::toy();
  for (const auto& ex : examples) {
    archive.add(image_key(ex.image_id), ex.image.embeddings);
    archive.metadata["caption/" + std::to_string(ex.image_id)] = vocab.detokenize(ex.caption.tokens);
    if (ex.scene) archive.metadata["scene/" + std::to_string(ex.image_id)] = ex.scene->encode();
  }
  write_archive(path, archive);
}

std::vector<Example> load_dataset(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  const Vocabulary& vocab = Vocabulary::toy();
  std::vector<Example> out;
  for (auto& [id, img] : load_embeddings(path)) {
    const std::string key = std::to_string(id);
    auto cap = archive.metadata.find("caption/" + key);
    if (cap == archive.metadata.end()) {
      throw FormatError("dataset archive: image " + key + " has no caption");
    }
    Example ex;
    ex.image_id = id;
    ex.image = img;
    ex.caption = {id, vocab.tokenize(cap->second)};
    if (auto sc = archive.metadata.find("scene/" + key); sc != archive.metadata.end()) {
      ex.scene = SyntheticScene::decode(sc->second);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

DatasetSplits split_dataset(std::vector<Example> examples, std::uint64_t seed) {
  const std::size_t n = examples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t held = static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(n)));
  if (n >= 3) held = std::max<std::size_t>(held, 1);
  if (2 * held >= n) held = n / 3;
  DatasetSplits s;
  for (std::size_t i = 0; i < n; ++i) {
    auto& ex = examples[order[i]];
    if (i < held) {
      s.val.push_back(std::move(ex));
    } else if (i < 2 * held) {
      s.test.push_back(std::move(ex));
    } else {
      s.train.push_back(std::move(ex));
    }
  }
  return s;
}

template <typename S>
BasicTensor<S> project_images(const BasicTensor<S>& embeddings, const BasicTensor<S>& projection,
                              double dropout_p, bool training, Rng* rng) {
  if (embeddings.rank() != 2 || projection.rank() != 2 || embeddings.dim(1) != projection.dim(0)) {
    throw DimensionError("project_images: embeddings " + shape_string(embeddings.shape()) +
                         " vs projection " + shape_string(projection.shape()));
  }
  BasicTensor<S> e = embeddings;
  if (training && dropout_p > 0.0) {
    if (rng == nullptr) throw ConfigError("project_images: training dropout needs an rng");
    e = dropout(e, dropout_p, *rng);
  }
  return matmul(e, projection);
}

SequenceLayout make_layout(const CaptionRecord& caption) {
  SequenceLayout l;
  const std::size_t n = std::min(caption.tokens.size(), kMaxCaptionTokens);
  l.caption_length = n;
  l.truncated = caption.tokens.size() > kMaxCaptionTokens;
  l.token_ids.assign(kSequenceLength, kPadToken);
  l.context_ids.assign(kSequenceLength, kTextContext);
  l.token_ids[0] = kBosToken;
  for (std::size_t i = 0; i < kImageTokens; ++i) {
    l.token_ids[kFirstImagePosition + i] = kImageToken;
    l.context_ids[kFirstImagePosition + i] = kImageContext;
  }
  for (std::size_t i = 0; i < n; ++i) l.token_ids[kFirstCaptionPosition + i] = caption.tokens[i];
  // A 63-token caption fills the sequence and leaves no slot for [EOS].
  const std::size_t eos = kFirstCaptionPosition + n;
  if (eos < kSequenceLength) l.token_ids[eos] = kEosToken;

  l.targets.assign(kSequenceLength, kPadToken);
  l.loss_mask.assign(kSequenceLength, 0);
  for (std::size_t i = 0; i + 1 < kSequenceLength; ++i) l.targets[i] = l.token_ids[i + 1];
  for (std::size_t i = kImageTokens; i + 1 < kSequenceLength; ++i) {
    const std::size_t next = i + 1;
    l.loss_mask[i] = next >= kFirstCaptionPosition && next <= eos ? 1 : 0;
  }
  return l;
}

template <typename S>
AssembledSequence<S> assemble(const CaptionRecord& caption, const BasicTensor<S>& image_block) {
  if (image_block.rank() != 2 || image_block.dim(0) != kImageTokens) {
    throw DimensionError("assemble: image block must be [64, d_model], got " +
                         shape_string(image_block.shape()));
  }
  return {make_layout(caption), image_block};
}

template <typename S>
ModelInput<S> make_input(std::span<const SequenceLayout> layouts, const BasicTensor<S>& image_block) {
  ModelInput<S> in;
  in.batch = layouts.size();
  in.seq_len = kSequenceLength;
  for (std::size_t b = 0; b < layouts.size(); ++b) {
    const auto& l = layouts[b];
    in.token_ids.insert(in.token_ids.end(), l.token_ids.begin(), l.token_ids.end());
    in.context_ids.insert(in.context_ids.end(), l.context_ids.begin(), l.context_ids.end());
    if (image_block.defined()) {
      for (std::size_t i = 0; i < kImageTokens; ++i) {
        in.image_rows.push_back(b * kSequenceLength + kFirstImagePosition + i);
      }
    }
  }
  in.image_block = image_block;
  return in;
}

template <typename S>
ModelInput<S> collate(std::span<const AssembledSequence<S>> sequences) {
  std::vector<SequenceLayout> layouts;
  std::vector<BasicTensor<S>> blocks;
  for (const auto& s : sequences) {
    layouts.push_back(s.layout);
    blocks.push_back(s.image_block);
  }
  return make_input<S>(layouts, concat_rows<S>(blocks));
}

RgbImage render_scene(const SyntheticScene& scene, std::size_t size) {
  RgbImage img{size, size, std::vector<std::uint8_t>(size * size * 3, 200)};
  const double ch = static_cast<double>(size) / static_cast<double>(scene.rows);
  const double cw = static_cast<double>(size) / static_cast<double>(scene.cols);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t r = std::min(scene.rows - 1, static_cast<std::size_t>(static_cast<double>(y) / ch));
      const std::size_t c = std::min(scene.cols - 1, static_cast<std::size_t>(static_cast<double>(x) / cw));
      const auto& cell = scene.cells[r * scene.cols + c];
      // Cell-local coordinates in [-1, 1].
      const double u = 2.0 * ((static_cast<double>(x) + 0.5) / cw - static_cast<double>(c)) - 1.0;
      const double v = 2.0 * ((static_cast<double>(y) + 0.5) / ch - static_cast<double>(r)) - 1.0;
      const double rad = std::hypot(u, v);
      bool inside = false;
      switch (cell.shape) {
        case 0: inside = rad < 0.7; break;
        case 1: inside = std::abs(u) < 0.6 && std::abs(v) < 0.6; break;
        case 2: inside = v < 0.6 && v > -0.7 && std::abs(u) < (v + 0.7) * 0.55; break;
        case 3: inside = rad < 0.3 + 0.4 * std::pow(std::abs(std::cos(2.5 * std::atan2(v, u))), 3.0); break;
        case 4: inside = (std::abs(u) < 0.2 && std::abs(v) < 0.7) || (std::abs(v) < 0.2 && std::abs(u) < 0.7); break;
        case 5: inside = std::pow(u * u + v * v - 0.35, 3.0) - u * u * std::pow(-v, 3.0) < 0.0; break;
        case 6: inside = std::abs(u) + std::abs(v) < 0.75; break;
        default: inside = rad < 0.7 && rad > 0.4; break;
      }
      if (!inside) continue;
      const auto& rgb = kColorRgb[cell.color];
      std::copy(rgb.begin(), rgb.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>((y * size + x) * 3));
    }
  }
  return img;
}

template BasicTensor<float> project_images(const BasicTensor<float>&, const BasicTensor<float>&, double,
                                           bool, Rng*);
template BasicTensor<double> project_images(const BasicTensor<double>&, const BasicTensor<double>&, double,
                                            bool, Rng*);
template AssembledSequence<float> assemble(const CaptionRecord&, const BasicTensor<float>&);
template AssembledSequence<double> assemble(const CaptionRecord&, const BasicTensor<double>&);
template ModelInput<float> make_input(std::span<const SequenceLayout>, const BasicTensor<float>&);
template ModelInput<double> make_input(std::span<const SequenceLayout>, const BasicTensor<double>&);
template ModelInput<float> collate(std::span<const AssembledSequence<float>>);
template ModelInput<double> collate(std::span<const AssembledSequence<double>>);

}  // namespace cpeft
