#include "cpeft/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace cpeft {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'E', 'F', 'T', 'A', 'R', 'C'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void TensorArchive::add(std::string name, const Tensor& tensor) {
  if (index_.count(name)) throw FormatError("archive: duplicate tensor name '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(std::move(name), tensor);
}

bool TensorArchive::contains(const std::string& name) const { return index_.count(name) > 0; }

const Tensor& TensorArchive::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("archive: no tensor named '" + name + "'");
  return entries_[it->second].second;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json manifest;
  manifest["format"] = "cpeft-tensor-archive";
  manifest["version"] = kArchiveVersion;
  manifest["metadata"] = archive.metadata;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.entries()) {
    const std::uint64_t nbytes = t.numel() * sizeof(float);
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kArchiveVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& entry : archive.entries()) {
    for (float v : entry.second.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("archive: cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("archive: write to '" + path.string() + "' failed");
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("archive: cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  constexpr std::size_t kHeader = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < kHeader || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("archive: '" + path.string() + "' is not a tensor archive");
  }
  const auto version = get_le<std::uint32_t>(p + 8);
  if (version != kArchiveVersion) {
    throw FormatError("archive: unsupported version " + std::to_string(version));
  }
  const auto manifest_len = get_le<std::uint64_t>(p + 12);
  if (manifest_len > bytes.size() - kHeader) throw FormatError("archive: truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(kHeader, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: corrupt manifest: ") + e.what());
  }
  const std::size_t blob_start = kHeader + manifest_len;
  const std::size_t blob_size = bytes.size() - blob_start;

  TensorArchive archive;
  try {
    archive.metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "f32") {
        throw FormatError("archive: unsupported dtype " + t.at("dtype").dump());
      }
      const Shape shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("nbytes").get<std::uint64_t>();
      const std::size_t n = shape_numel(shape);
      if (nbytes != n * sizeof(float) || offset > blob_size || nbytes > blob_size - offset) {
        throw FormatError("archive: tensor '" + t.at("name").get<std::string>() +
                          "' has inconsistent size or lies outside the blob region");
      }
      std::vector<float> values(n);
      const unsigned char* src = p + blob_start + offset;
      for (std::size_t i = 0; i < n; ++i) {
        values[i] = std::bit_cast<float>(get_le<std::uint32_t>(src + 4 * i));
      }
      archive.add(t.at("name").get<std::string>(), Tensor::from(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: corrupt manifest: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("archive: bad tensor shape: ") + e.what());
  }
  return archive;
}

}  // namespace cpeft
