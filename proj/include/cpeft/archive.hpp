#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cpeft/tensor.hpp"

namespace cpeft {

// Named fp32 tensors plus a string metadata map.
//
// On disk: the 8-byte magic "CPEFTARC", a little-endian u32 format version, a
// little-endian u64 manifest length, the JSON manifest, then the tensor blobs
// as raw little-endian fp32. The manifest lists every tensor's name, shape,
// dtype, byte offset (relative to the start of the blob region) and byte
// size, together with the metadata map. Output is byte-for-byte
// deterministic for equal contents.
class TensorArchive {
 public:
  std::map<std::string, std::string> metadata;

  void add(std::string name, const Tensor& tensor);
  bool contains(const std::string& name) const;
  // Throws FormatError when absent.
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
// Throws FormatError on a missing file, bad magic, corrupt manifest or
// truncated blob region.
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace cpeft
