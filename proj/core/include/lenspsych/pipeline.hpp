#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lenspsych/corpus.hpp"
#include "lenspsych/lens.hpp"
#include "lenspsych/model.hpp"
#include "lenspsych/ngram.hpp"
#include "lenspsych/psychofit.hpp"
#include "lenspsych/run_config.hpp"
#include "lenspsych/tokenizer.hpp"

namespace lenspsych {

inline constexpr const char* kWorkersEnv = "LENSPSYCH_WORKERS";

/// CLI flag, then the environment variable, then the config value.
int resolve_workers(std::optional<int> cli, int config_value);

/// Runs fn(0..n-1) on up to `workers` threads. The exception of the lowest
/// failing index is rethrown after all threads finish.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

/// One reading-corpus sequence in word_index order.
struct Sequence {
  std::string seq_id;
  int first_index = 0;
  std::vector<std::string> words;       // displayed words
  std::vector<std::string> model_words; // token_override where given
};

/// Word indices of each sequence must be contiguous.
std::vector<Sequence> sequences_from_records(std::span<const WordRecord> records);

/// Tokenizes the sequence with a BOS token prepended and fills token and
/// word surprisals for every requested lens.
SurprisalTable score_sequence(const ModelBundle& model, const Tokenizer& tokenizer, const Sequence& seq,
                              std::span<const LensKind> lenses, const TranslatorSet* translators,
                              WindowOptions window = {});

/// Word rows of a surprisal TSV keyed by (seq_id, word_index).
WordSurprisals read_word_surprisals(const std::filesystem::path& path);

/// Hash of every regular file directly inside `dir` (names and bytes).
std::uint64_t hash_directory(const std::filesystem::path& dir);

// Commands. Progress goes to `log`; errors are thrown as ConfigError/DataError.
void cmd_fit_lens(const RunConfig& config, std::ostream& log);
void cmd_surprisal(const RunConfig& config, std::ostream& log);
void cmd_evaluate(const RunConfig& config, std::ostream& log);
void cmd_correlate(const RunConfig& config, std::ostream& log);
void cmd_report(const RunConfig& config, std::ostream& log);

void cmd_ngram_train(const std::filesystem::path& corpus, const std::filesystem::path& out_dir,
                     const SmoothingConfig& smoothing, int workers, std::ostream& log);

struct ToyOptions {
  std::uint64_t seed = 7;
  ModelConfig config;
  bool fixture = false;  // also write corpora, reading data and a run config
};

void cmd_make_toy(const std::filesystem::path& out_dir, const ToyOptions& options, std::ostream& log);

/// Loads and validates a bundle (and tokenizer files when present); returns a summary.
std::string cmd_validate_bundle(const std::filesystem::path& dir);

}  // namespace lenspsych
