#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lenspsych/corpus.hpp"
#include "lenspsych/lens.hpp"
#include "lenspsych/ngram.hpp"

namespace lenspsych {

struct ModelEntry {
  std::string id;
  std::filesystem::path bundle;
  std::string family;
  double param_count = 0.0;
  /// "trained" (output of fit-lens), "identity", or a translator directory.
  std::string translators = "trained";
};

struct DatasetEntry {
  std::string id;
  std::filesystem::path path;
  std::optional<Measure> measure;
  std::string stimuli;  // defaults to id
};

enum class LensSelection { logit, tuned, both };

std::string_view to_string(LensSelection s);
LensSelection parse_lens_selection(std::string_view name);

struct RunConfig {
  std::filesystem::path config_dir;
  std::vector<ModelEntry> models;
  std::vector<DatasetEntry> datasets;
  std::optional<std::filesystem::path> frequency;
  double frequency_floor = 0.01;
  LensSelection lens = LensSelection::logit;
  ClauseFinalMode clause_final = ClauseFinalMode::off;
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;
  int workers = 1;
  WindowOptions window;
  bool exclude_incomplete = true;

  std::optional<std::filesystem::path> lens_corpus;
  TrainingOptions lens_training;

  std::optional<std::filesystem::path> ngram_corpus;
  SmoothingConfig ngram_smoothing;

  /// Model whose last layer serves as the well-contextualized comparator.
  std::string reference_model;

  std::vector<LensKind> lenses() const;
  const ModelEntry& model(std::string_view id) const;
};

/// JSON document; relative paths resolve against the config file's directory.
/// Unknown keys and wrong types raise ConfigError.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& config_dir);
RunConfig load_run_config(const std::filesystem::path& file);

/// Checks that every referenced input exists (ConfigError otherwise).
void validate_paths(const RunConfig& config);

}  // namespace lenspsych
