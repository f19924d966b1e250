#pragma once

// Directory container shared by model bundles and translator sets:
// manifest.json (header fields + tensor table) and raw little-endian
// float32 blobs addressed by file and byte offset.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace lenspsych::detail {

struct StoredTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::int64_t numel() const;
};

struct TensorDirectory {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;
};

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kBlobName = "tensors.bin";

TensorDirectory read_tensor_directory(const std::filesystem::path& dir);

/// Writes manifest.json and tensors.bin; tensors are laid out in name order.
void write_tensor_directory(const std::filesystem::path& dir, const TensorDirectory& contents);

std::string shape_string(const std::vector<std::int64_t>& shape);

}  // namespace lenspsych::detail
