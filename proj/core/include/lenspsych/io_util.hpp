#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace lenspsych {

/// Writes via a sibling temp file and rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

/// Shortest decimal form that round-trips to the same double.
std::string format_double(double value);

/// Fixed-point formatting used in human-facing tables.
std::string format_fixed(double value, int decimals);

std::vector<std::string> split_tabs(std::string_view line);

std::string_view trim(std::string_view s);

/// 64-bit FNV-1a; used to key cached intermediate artifacts, not for security.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace lenspsych
