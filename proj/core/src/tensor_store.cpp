#include "tensor_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"

namespace lenspsych::detail {

namespace fs = std::filesystem;
using nlohmann::json;

std::int64_t StoredTensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void to_little_endian(std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xff) << 24) | ((bits & 0xff00) << 8) | ((bits >> 8) & 0xff00) |
             (bits >> 24);
      v = std::bit_cast<float>(bits);
    }
  }
}

}  // namespace

TensorDirectory read_tensor_directory(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw DataError("missing manifest: " + manifest_path.string());

  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("tensors") || !manifest["tensors"].is_object())
    throw DataError("manifest has no tensor table: " + manifest_path.string());

  TensorDirectory out;
  out.header = manifest;
  out.header.erase("tensors");

  std::map<std::string, std::string> blobs;
  for (const auto& [name, entry] : manifest["tensors"].items()) {
    try {
      StoredTensor t;
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto dtype = entry.value("dtype", std::string("float32"));
      if (dtype != "float32") throw DataError("unsupported dtype " + dtype + " for tensor " + name);
      const auto file = entry.at("file").get<std::string>();
      const auto offset = entry.at("offset").get<std::int64_t>();
      for (auto d : t.shape)
        if (d <= 0) throw DataError("invalid shape for tensor " + name);

      auto it = blobs.find(file);
      if (it == blobs.end()) {
        const fs::path blob_path = dir / file;
        if (!fs::exists(blob_path))
          throw DataError("missing data file " + file + " for tensor " + name);
        it = blobs.emplace(file, read_file(blob_path)).first;
      }
      const std::string& blob = it->second;
      const auto bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
      if (offset < 0 || static_cast<std::size_t>(offset) + bytes > blob.size())
        throw DataError("tensor " + name + " extends past end of " + file);
      t.values.resize(static_cast<std::size_t>(t.numel()));
      std::memcpy(t.values.data(), blob.data() + offset, bytes);
      to_little_endian(t.values);
      out.tensors.emplace(name, std::move(t));
    } catch (const json::exception& e) {
      throw DataError("malformed tensor entry " + name + ": " + e.what());
    }
  }
  return out;
}

void write_tensor_directory(const fs::path& dir, const TensorDirectory& contents) {
  fs::create_directories(dir);
  json manifest = contents.header;
  json table = json::object();
  std::string blob;
  for (const auto& [name, tensor] : contents.tensors) {
    if (static_cast<std::int64_t>(tensor.values.size()) != tensor.numel())
      throw DataError("tensor " + name + " has " + std::to_string(tensor.values.size()) +
                      " values for shape " + shape_string(tensor.shape));
    table[name] = {{"shape", tensor.shape},
                   {"dtype", "float32"},
                   {"file", kBlobName},
                   {"offset", blob.size()}};
    std::vector<float> le = tensor.values;
    to_little_endian(le);
    blob.append(reinterpret_cast<const char*>(le.data()), le.size() * sizeof(float));
  }
  manifest["tensors"] = std::move(table);
  write_file_atomic(dir / kBlobName, blob);
  write_file_atomic(dir / kManifestName, manifest.dump(2) + "\n");
}

}  // namespace lenspsych::detail
