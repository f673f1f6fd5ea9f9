#include "cpeft/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cpeft {

HeatmapGrid extract_heatmap(const AttentionTrace& trace, std::size_t layer, std::size_t start,
                            std::size_t end) {
  if (layer >= trace.layers.size()) {
    throw SpanError("layer " + std::to_string(layer) + " not in a trace of " +
                    std::to_string(trace.layers.size()) + " layers");
  }
  const Tensor& w = trace.layers[layer];
  if (w.rank() != 3 || w.dim(1) != w.dim(2)) {
    throw DimensionError("attention trace layer has shape " + shape_string(w.shape()));
  }
  const std::size_t heads = w.dim(0), len = w.dim(1);
  if (len <= kImageTokens) throw SpanError("trace is shorter than the image region");
  if (start >= end || end > len) {
    throw SpanError("span [" + std::to_string(start) + ", " + std::to_string(end) + ") is empty or outside [0, " +
                    std::to_string(len) + ")");
  }
  if (start < kFirstCaptionPosition) {
    throw SpanError("span [" + std::to_string(start) + ", " + std::to_string(end) +
                    ") overlaps the image region; caption rows start at " + std::to_string(kFirstCaptionPosition));
  }
  HeatmapGrid g;
  g.layer = layer;
  g.span_start = start;
  g.span_end = end;
  const auto data = w.data();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t r = start; r < end; ++r) {
      const std::size_t row = (h * len + r) * len;
      for (std::size_t p = 0; p < kImageTokens; ++p) g.values[p] += data[row + kFirstImagePosition + p];
    }
  }
  return g;
}

void write_heatmap_csv(const HeatmapGrid& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  char buf[32];
  for (std::size_t r = 0; r < kHeatmapSide; ++r) {
    for (std::size_t c = 0; c < kHeatmapSide; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", grid.at(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::array<double, kImageTokens> read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<double, kImageTokens> v{};
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      if (n >= kImageTokens) throw FormatError(path.string() + " has more than 64 values");
      try {
        v[n++] = std::stod(cell);
      } catch (const std::exception&) {
        throw FormatError(path.string() + ": bad number '" + cell + "'");
      }
    }
  }
  if (n != kImageTokens) throw FormatError(path.string() + " has " + std::to_string(n) + " values, expected 64");
  return v;
}

std::array<std::uint8_t, 3> ramp_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  // Piecewise-linear: navy -> teal -> yellow.
  const double lo[3] = {20, 20, 110}, mid[3] = {30, 160, 140}, hi[3] = {250, 230, 40};
  std::array<std::uint8_t, 3> out{};
  for (int k = 0; k < 3; ++k) {
    const double c = t < 0.5 ? lo[k] + (mid[k] - lo[k]) * (t / 0.5) : mid[k] + (hi[k] - mid[k]) * ((t - 0.5) / 0.5);
    out[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(std::lround(c));
  }
  return out;
}

RgbImage overlay_heatmap(const HeatmapGrid& grid, const RgbImage& base, double alpha) {
  if (base.width == 0 || base.height == 0 || base.pixels.size() != base.width * base.height * 3) {
    throw DimensionError("overlay base image is empty or malformed");
  }
  const auto [mn, mx] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double range = *mx - *mn;
  RgbImage out = base;
  for (std::size_t y = 0; y < base.height; ++y) {
    const std::size_t gr = y * kHeatmapSide / base.height;
    for (std::size_t x = 0; x < base.width; ++x) {
      const std::size_t gc = x * kHeatmapSide / base.width;
      const double t = range > 0.0 ? (grid.at(gr, gc) - *mn) / range : 0.0;
      const auto c = ramp_color(t);
      for (std::size_t k = 0; k < 3; ++k) {
        auto& px = out.pixels[(y * base.width + x) * 3 + k];
        px = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * px + alpha * c[k]));
      }
    }
  }
  return out;
}

void write_ppm(const RgbImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error("write failed for " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string magic;
  RgbImage img;
  int maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> img.width;
  skip_comments();
  in >> img.height;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || !in || maxval != 255 || img.width == 0 || img.height == 0) {
    throw FormatError(path.string() + " is not an 8-bit binary PPM");
  }
  in.get();
  img.pixels.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError(path.string() + " is truncated");
  }
  return img;
}

void export_heatmap(const HeatmapGrid& grid, const std::optional<RgbImage>& base,
                    const std::filesystem::path& stem) {
  auto csv = stem;
  csv += ".csv";
  write_heatmap_csv(grid, csv);
  if (base) {
    auto ppm = stem;
    ppm += ".ppm";
    write_ppm(overlay_heatmap(grid, *base), ppm);
  }
}

}  // namespace cpeft
