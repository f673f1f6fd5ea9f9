#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>

#include "cpeft/pipeline.hpp"
#include "cpeft/transformer.hpp"

namespace cpeft {

// Attention mass from a span of caption queries onto the 64 image tokens.
struct HeatmapGrid {
  std::array<double, kImageTokens> values{};  // row-major 8x8 patch order
  std::size_t layer = 0;
  std::size_t span_start = 0, span_end = 0;

  double at(std::size_t row, std::size_t col) const { return values[row * kHeatmapSide + col]; }
};

// Rows [start, end) of one layer's weights, image columns 1..64, summed over
// heads and rows. The span must lie inside the caption region; otherwise
// SpanError.
HeatmapGrid extract_heatmap(const AttentionTrace& trace, std::size_t layer, std::size_t start,
                            std::size_t end);

void write_heatmap_csv(const HeatmapGrid& grid, const std::filesystem::path& path);
// The 64 values of an 8x8 CSV grid.
std::array<double, kImageTokens> read_heatmap_csv(const std::filesystem::path& path);

// Min-max normalized ramp from dark blue (0) through to yellow (1).
std::array<std::uint8_t, 3> ramp_color(double t);

// Nearest-neighbour upscale of the grid onto the image, blended with the ramp
// colour at the given opacity. A constant grid maps to ramp bottom.
RgbImage overlay_heatmap(const HeatmapGrid& grid, const RgbImage& base, double alpha = 0.6);

// Binary portable pixmap (P6).
void write_ppm(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);

// Writes "<stem>.csv" and, when a base image is given, "<stem>.ppm".
void export_heatmap(const HeatmapGrid& grid, const std::optional<RgbImage>& base,
                    const std::filesystem::path& stem);

}  // namespace cpeft
