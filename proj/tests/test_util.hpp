#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cpeft/random.hpp"
#include "cpeft/tensor.hpp"

namespace testutil {

template <typename S = double>
cpeft::BasicTensor<S> uniform(cpeft::Shape shape, cpeft::Rng& rng, bool requires_grad = false, double lo = -1.0,
                              double hi = 1.0) {
  std::vector<S> v(cpeft::shape_numel(shape));
  for (auto& x : v) x = static_cast<S>(lo + (hi - lo) * rng.uniform());
  return cpeft::BasicTensor<S>::from(std::move(shape), std::move(v), requires_grad);
}

template <typename S>
double max_abs_diff(const cpeft::BasicTensor<S>& a, const cpeft::BasicTensor<S>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename S>
bool bit_equal(const cpeft::BasicTensor<S>& a, const cpeft::BasicTensor<S>& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("cpeft_" + tag + "_" + std::to_string(cpeft::Rng(std::hash<std::string>{}(tag)).next() % 100000) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this) % 100000));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace testutil
