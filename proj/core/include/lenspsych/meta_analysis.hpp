#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lenspsych/psychofit.hpp"
#include "lenspsych/stats.hpp"

namespace lenspsych {

/// l / L for 1 <= l <= L.
double relative_depth(int layer, int n_layers);

inline constexpr int kDepthBins = 5;
inline constexpr std::array<std::string_view, kDepthBins> kDepthBinLabels = {
    "0-0.2", "0.2-0.4", "0.4-0.6", "0.6-0.8", "0.8-1.0"};

/// Half-open bins [lo, hi) with the last bin closed at 1.0.
int depth_bin(int layer, int n_layers);

struct ModelInfo {
  std::string model_id;
  std::string family;
  double param_count = 0.0;
  int n_layers = 0;
};

using ModelRegistry = std::map<std::string, ModelInfo>;

/// Layer count from the registry, falling back to the deepest layer seen.
int model_layers(const ModelRegistry& registry, std::string_view model_id,
                 std::span<const DeltaLLRecord> records);

struct DepthBinRow {
  std::string dataset_id;
  LensKind lens = LensKind::logit;
  std::array<double, kDepthBins> mean{};         // per-row delta LL, NaN for empty bins
  std::array<std::size_t, kDepthBins> count{};   // contributing (model, layer) records
  int best_bin = -1;
};

/// Mean per-row delta LL of all (model, layer) records falling in each bin.
/// Non-finite delta LL values are skipped.
std::vector<DepthBinRow> depth_binned_table(std::span<const DeltaLLRecord> records,
                                            const ModelRegistry& registry);

/// Values times 1000; `*` marks the best bin.
void write_table1_tsv(std::ostream& out, std::span<const DepthBinRow> rows);

/// Argmax of per-row delta LL; ties go to the shallower layer.
std::pair<int, double> best_layer(std::span<const DeltaLLRecord> records);

/// Fraction of `values` strictly above `reference`.
double win_rate(std::span<const double> values, double reference);

struct WinRateRow {
  std::string dataset_id;
  std::string model_id;
  std::string family;
  LensKind lens = LensKind::logit;
  double reference = 0.0;  // best last-layer delta LL within the family
  double win_rate = 0.0;
  std::size_t layers = 0;
};

/// Every layer 1..L of each model is compared with the best last-layer
/// delta LL among models of the same family on the same dataset and lens.
std::vector<WinRateRow> win_rate_table(std::span<const DeltaLLRecord> records,
                                       const ModelRegistry& registry);
void write_table2_tsv(std::ostream& out, std::span<const WinRateRow> rows);

enum class ScalingMode { best_layer, last_layer };
std::string_view to_string(ScalingMode mode);

struct ScalingPoint {
  std::string model_id;
  double param_count = 0.0;
  double delta_ll = 0.0;
};

struct ScalingResult {
  double pearson_r = 0.0;
  bool degenerate = false;
  double slope = 0.0;  // delta LL per log10(params)
  double intercept = 0.0;
  std::size_t n = 0;
};

/// Needs at least 3 points with positive parameter counts.
ScalingResult scaling_effect(std::span<const ScalingPoint> points);

struct ScalingSeries {
  std::string dataset_id;
  LensKind lens = LensKind::logit;
  ScalingMode mode = ScalingMode::best_layer;
  std::vector<ScalingPoint> points;
};

std::vector<ScalingSeries> scaling_series(std::span<const DeltaLLRecord> records,
                                          const ModelRegistry& registry);

// ---------------------------------------------------------------------------

struct SettingRow {
  std::string stimuli;
  std::string model;
  std::string lens;
  std::string measure;
  double layer_depth = 0.0;
  double delta_ll = 0.0;
};

struct InteractionFit {
  OlsFit fit;
  std::map<std::string, std::string> reference_level;  // factor -> dropped level
  std::vector<std::string> measure_levels;             // sorted, reference first
  std::vector<std::size_t> nuisance_columns;           // stimuli/model/lens dummies
};

/// delta_ll ~ stimuli + model + lens + measure + layer_depth + measure:layer_depth
/// with treatment coding. FPGD is the measure reference when present; other
/// factors use their first sorted level. Column names follow the
/// `measure[T.MAZE]:layer_depth` convention.
InteractionFit interaction_regression(std::span<const SettingRow> rows);

void write_coefficients_tsv(std::ostream& out, const OlsFit& fit);

struct CorrectedCurve {
  std::string measure;
  double a = 0.0, b = 0.0, c = 0.0;  // a + b d + c d^2
  std::vector<std::pair<double, double>> points;  // (depth, corrected delta LL)
};

/// Subtracts the fitted stimuli/model/lens contributions (intercept kept) and
/// fits a quadratic in depth per measure.
std::vector<CorrectedCurve> corrected_dll_curves(std::span<const SettingRow> rows,
                                                 const InteractionFit& fit);

// ---------------------------------------------------------------------------

struct ErrorRow {
  std::string model_id;
  double length = 0.0;
  double freq = 0.0;
  double position = 0.0;
  std::string pos;
  bool has_punct = false;
  bool has_num = false;
  double error_decrease = 0.0;
};

/// Punctuation / digit flags for a displayed word.
bool word_has_punct(std::string_view word);
bool word_has_num(std::string_view word);

/// error_decrease ~ model + pos + length + freq + position + has_punct + has_num.
OlsFit residual_error_regression(std::span<const ErrorRow> rows);

struct ContextualizationRow {
  int layer = 0;
  double depth = 0.0;
  PearsonResult bigram;
  PearsonResult reference;
};

struct ContextualizationResult {
  std::vector<ContextualizationRow> layers;
  PearsonResult depth_vs_bigram;
  PearsonResult depth_vs_reference;
};

/// layer_surprisal[l-1][w] against aligned bigram and reference surprisals.
ContextualizationResult contextualization_correlation(
    std::span<const std::vector<double>> layer_surprisal, std::span<const double> bigram,
    std::span<const double> reference);

}  // namespace lenspsych
