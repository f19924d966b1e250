#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lenspsych {

enum class Measure { SPR, FPGD, MAZE, N400 };

std::string_view to_string(Measure m);
Measure parse_measure(std::string_view name);

/// Behavioural measures are latencies; zero values are recording artefacts.
inline bool is_behavioral(Measure m) { return m != Measure::N400; }

/// Length and log-frequency of w_t, w_{t-1}, w_{t-2} (index 0, 1, 2).
struct Covariates {
  bool attached = false;
  bool complete = false;  // both predecessors exist in the sequence
  std::array<double, 3> length{};
  std::array<double, 3> log_freq{};
};

struct WordRecord {
  std::string dataset_id;
  std::string stimuli_id;
  std::string seq_id;
  int word_index = 0;
  std::string word;
  Measure measure = Measure::SPR;
  double cost = 0.0;  // ms for SPR/FPGD/MAZE, microvolts for N400
  std::optional<double> baseline_amplitude;
  std::optional<bool> clause_final;
  int subject_count = 1;
  std::optional<std::string> token_override;
  std::optional<std::string> pos;
  Covariates covariates;

  /// Text fed to the tokenizer for this word.
  const std::string& model_text() const { return token_override ? *token_override : word; }
};

struct DatasetDeclaration {
  std::string dataset_id;
  std::string stimuli_id;
  std::optional<Measure> measure;  // when set, rows of other measures are skipped
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_skipped_measure = 0;
  std::size_t records = 0;
  std::size_t dropped_zero_cost = 0;
};

/// Parses the reading TSV (header row required; `#` comment lines allowed)
/// and averages per-subject rows into one record per (seq_id, word_index,
/// measure). Output is ordered by natural seq_id order, then word_index.
std::vector<WordRecord> read_reading_tsv(std::istream& in, const DatasetDeclaration& decl,
                                         LoadReport* report = nullptr);
std::vector<WordRecord> load_reading_tsv(const std::filesystem::path& path,
                                         const DatasetDeclaration& decl,
                                         LoadReport* report = nullptr);

/// Writes records back in the reading TSV schema (already averaged).
void write_reading_tsv(std::ostream& out, std::span<const WordRecord> records);

/// Drops zero-cost rows for behavioural measures. With require_baseline, N400
/// records must carry baseline_amplitude.
std::vector<WordRecord> preprocess(std::vector<WordRecord> records, bool require_baseline = false,
                                   LoadReport* report = nullptr);

class FrequencyTable {
 public:
  explicit FrequencyTable(double floor_per_million = 0.01) : floor_(floor_per_million) {}

  void set(std::string_view word, double per_million);

  /// Occurrences per million; 0 for out-of-vocabulary words.
  double per_million(std::string_view word) const;

  /// log(per_million + floor).
  double log_frequency(std::string_view word) const;

  double floor() const { return floor_; }
  std::size_t size() const { return table_.size(); }

  /// Lookup key: ASCII-lowercased, leading/trailing punctuation stripped.
  static std::string normalize(std::string_view word);

 private:
  double floor_;
  std::unordered_map<std::string, double> table_;
};

FrequencyTable read_frequency_tsv(std::istream& in, double floor_per_million = 0.01);
FrequencyTable load_frequency_tsv(const std::filesystem::path& path, double floor_per_million = 0.01);

/// Number of Unicode code points.
std::size_t utf8_length(std::string_view s);

/// Fills covariates; context is looked up by word_index - 1 / - 2 within the
/// same seq_id, so it must run before any row filtering.
void attach_covariates(std::vector<WordRecord>& records, const FrequencyTable& freq);

enum class ClauseFinalMode { off, column, punctuation };

std::string_view to_string(ClauseFinalMode mode);
ClauseFinalMode parse_clause_final_mode(std::string_view name);

/// Punctuation mode marks words ending in . , ; : ! ? (closing quotes and
/// brackets ignored) and the last word of each sequence.
void mark_clause_final(std::vector<WordRecord>& records, ClauseFinalMode mode);

/// Fraction of positions where two flag vectors agree.
double flag_agreement(const std::vector<bool>& a, const std::vector<bool>& b);

/// Numeric-aware ordering ("s2" < "s10").
bool natural_less(std::string_view a, std::string_view b);

}  // namespace lenspsych
