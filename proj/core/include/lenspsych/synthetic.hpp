#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lenspsych/corpus.hpp"
#include "lenspsych/meta_analysis.hpp"

namespace lenspsych {

/// Short English-like sentences from a fixed grammar and lexicon. Words carry
/// attached punctuation the way reading corpora display them.
std::vector<std::string> synthetic_sentences(std::uint64_t seed, std::size_t count);

/// Part-of-speech tag of a synthetic-grammar word (Penn tags), "NN" when unknown.
std::string synthetic_pos(std::string_view word);

/// Per-million frequencies counted from `sentences` (normalized word keys).
FrequencyTable frequency_from_corpus(std::span<const std::string> sentences);

struct PlantedCostOptions {
  double intercept = 300.0;
  double surprisal_coef = 5.0;
  double length_coef = 0.3;
  double target_r2 = 0.5;  // noise variance = signal variance (1 - R2) / R2
  Measure measure = Measure::SPR;
  std::string dataset_id = "synthetic";
};

/// One averaged record per word: cost = intercept + surprisal_coef * s +
/// length_coef * length + noise. `surprisal[i][w]` is the planted predictor
/// for word w of sentence i; word indices start at 0.
std::vector<WordRecord> planted_reading_records(std::span<const std::string> sentences,
                                                std::span<const std::vector<double>> surprisal,
                                                const PlantedCostOptions& options, std::uint64_t seed);

struct PlantedSettingsOptions {
  std::vector<std::string> stimuli = {"stim_a", "stim_b"};
  std::vector<std::pair<std::string, int>> models = {{"small", 6}, {"medium", 12}, {"large", 24}};
  std::vector<std::string> lenses = {"logit", "tuned"};
  std::map<std::string, double> measure_slope = {{"FPGD", -0.5}, {"SPR", -0.5}, {"MAZE", 1.0}};
  double noise = 0.3;
};

/// Settings rows with additive stimuli/model/lens/measure effects plus a
/// per-measure linear depth slope.
std::vector<SettingRow> planted_settings(std::uint64_t seed, const PlantedSettingsOptions& options = {});

}  // namespace lenspsych
