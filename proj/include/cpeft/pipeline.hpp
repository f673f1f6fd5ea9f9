#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpeft/einsum_context.hpp"
#include "cpeft/ops.hpp"
#include "cpeft/random.hpp"
#include "cpeft/tensor.hpp"
#include "cpeft/transformer.hpp"

namespace cpeft {

// Sequence layout: [BOS] | 64 image embeddings | caption | [EOS] | [PAD]...
inline constexpr std::size_t kSequenceLength = 128;
inline constexpr std::size_t kImageTokens = 64;
inline constexpr std::size_t kMaxCaptionTokens = 63;
inline constexpr std::size_t kFirstImagePosition = 1;
inline constexpr std::size_t kFirstCaptionPosition = kFirstImagePosition + kImageTokens;
inline constexpr std::size_t kHeatmapSide = 8;

inline constexpr ContextId kImageContext = 0;
inline constexpr ContextId kTextContext = 1;

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kBosToken = 1;
inline constexpr TokenId kEosToken = 2;
inline constexpr TokenId kImageToken = 3;

// Closed word-level vocabulary; ids 0-3 are [PAD], [BOS], [EOS], [IMG].
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  // Specials, then colour words, shape words and function words.
  static const Vocabulary& toy();

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  // Throws FormatError for words outside the vocabulary.
  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const;

  std::vector<TokenId> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId> ids_;
};

const std::vector<std::string>& color_words();
const std::vector<std::string>& shape_words();

// Precomputed vision-encoder output for one image: exactly 64 rows.
struct ImageEmbeddingSet {
  Tensor embeddings;  // [64, d_vis]
  std::size_t d_vis() const { return embeddings.dim(1); }
};

struct CaptionRecord {
  std::uint32_t image_id = 0;
  std::vector<TokenId> tokens;
};

struct SceneConfig {
  std::size_t grid_rows = 2;
  std::size_t grid_cols = 2;
  std::size_t num_colors = 8;
  std::size_t num_shapes = 6;
  std::size_t d_vis = 64;

  void validate() const;
  bool operator==(const SceneConfig&) const = default;
};

struct SceneCell {
  std::uint8_t shape = 0;
  std::uint8_t color = 0;
  bool operator==(const SceneCell&) const = default;
};

// A grid of coloured shapes, stored in raster order.
struct SyntheticScene {
  std::size_t rows = 0, cols = 0;
  std::vector<SceneCell> cells;

  // "<color> <shape> and <color> <shape> ..." over cells in raster order.
  std::string caption() const;
  // Deterministic stand-in for a vision encoder: patch p of the 8x8 patch
  // grid gets colour and shape codes of the cell it falls in plus a
  // positional code.
  ImageEmbeddingSet embed(std::size_t d_vis) const;
  std::string encode() const;
  static SyntheticScene decode(const std::string& text);
  bool operator==(const SyntheticScene&) const = default;
};

struct Example {
  std::uint32_t image_id = 0;
  ImageEmbeddingSet image;
  CaptionRecord caption;
  std::optional<SyntheticScene> scene;
};

std::vector<Example> synth_dataset(std::size_t n, std::uint64_t seed, const SceneConfig& config = {});

// Embedding archives hold one [64, d_vis] tensor per image named "image/<id>".
std::vector<std::pair<std::uint32_t, ImageEmbeddingSet>> load_embeddings(
    const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path,
                     std::span<const std::pair<std::uint32_t, ImageEmbeddingSet>> images);

// Dataset archives add caption text and (for synthetic data) the scene code to
// the manifest metadata.
void save_dataset(const std::filesystem::path& path, std::span<const Example> examples,
                  const std::map<std::string, std::string>& extra_metadata = {});
std::vector<Example> load_dataset(const std::filesystem::path& path);

struct DatasetSplits {
  std::vector<Example> train, val, test;
};

// Seeded 90/5/5 split; val and test get at least one example when n >= 3.
DatasetSplits split_dataset(std::vector<Example> examples, std::uint64_t seed);

// (dropout(e)) . P for e [64, d_vis], P [d_vis, d_model]. Dropout only when
// training.
template <typename S>
BasicTensor<S> project_images(const BasicTensor<S>& embeddings, const BasicTensor<S>& projection,
                              double dropout_p, bool training, Rng* rng);

// Per-position arrays of one assembled sequence.
struct SequenceLayout {
  std::vector<TokenId> token_ids;
  std::vector<ContextId> context_ids;
  std::vector<TokenId> targets;            // next-token targets; [PAD] past the end
  std::vector<std::uint8_t> loss_mask;
  std::size_t caption_length = 0;          // after truncation
  bool truncated = false;
};

SequenceLayout make_layout(const CaptionRecord& caption);

template <typename S>
struct AssembledSequence {
  SequenceLayout layout;
  BasicTensor<S> image_block;  // [64, d_model], already projected
};

template <typename S>
AssembledSequence<S> assemble(const CaptionRecord& caption, const BasicTensor<S>& image_block);

// Stacks sequences into one model input; image blocks are concatenated.
template <typename S>
ModelInput<S> collate(std::span<const AssembledSequence<S>> sequences);

// Model input for a batch of layouts and a stacked image block
// [batch * 64, d_model] (undefined for text-only batches).
template <typename S>
ModelInput<S> make_input(std::span<const SequenceLayout> layouts, const BasicTensor<S>& image_block);

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // RGB, row-major
};

RgbImage render_scene(const SyntheticScene& scene, std::size_t size = 256);

}  // namespace cpeft
