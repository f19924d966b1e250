#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lenspsych {

enum class Smoothing { add_k, kneser_ney };

std::string_view to_string(Smoothing s);
Smoothing parse_smoothing(std::string_view name);

struct SmoothingConfig {
  Smoothing kind = Smoothing::kneser_ney;
  double k = 1.0;           // add-k pseudo-count
  double discount = 0.75;   // absolute discount for Kneser-Ney
  bool normalize = true;    // lowercase, strip edge punctuation before counting
};

/// Word-level bigram model. Vocabulary is every word type seen as a target
/// plus <unk>; the start symbol <s> only ever appears as a context.
class BigramModel {
 public:
  static constexpr std::string_view kStart = "<s>";
  static constexpr std::string_view kUnknown = "<unk>";

  BigramModel() = default;
  BigramModel(SmoothingConfig smoothing, std::map<std::pair<std::string, std::string>, std::int64_t> bigrams,
              std::vector<std::string> vocabulary);

  double prob(std::string_view context, std::string_view word) const;
  double log_prob(std::string_view context, std::string_view word) const;

  /// Maps a raw word to its vocabulary entry (<unk> when unseen).
  std::string key(std::string_view word) const;

  const SmoothingConfig& smoothing() const { return smoothing_; }
  std::size_t vocab_size() const { return vocabulary_.size(); }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  const std::map<std::pair<std::string, std::string>, std::int64_t>& bigrams() const { return bigrams_; }
  std::int64_t count(std::string_view context, std::string_view word) const;
  std::int64_t context_count(std::string_view context) const;
  std::int64_t unigram_count(std::string_view word) const;

  /// Interpolated continuation distribution used as the Kneser-Ney lower order.
  double continuation_prob(std::string_view word) const;

 private:
  SmoothingConfig smoothing_;
  std::map<std::pair<std::string, std::string>, std::int64_t> bigrams_;
  std::vector<std::string> vocabulary_;  // sorted
  std::unordered_map<std::string, std::int64_t> context_total_;
  std::unordered_map<std::string, std::int64_t> context_types_;
  std::unordered_map<std::string, std::int64_t> target_total_;
  std::unordered_map<std::string, std::int64_t> continuation_;  // N1+(. w)
  std::int64_t continuation_total_ = 0;                          // N1+(. .)
  std::int64_t continuation_types_ = 0;                          // |{w : N1+(. w) > 0}|
};

/// One sentence per string; each starts from <s>. Shards are counted on
/// `workers` threads and merged, so the result is independent of `workers`.
BigramModel train_bigram(std::span<const std::string> sentences, const SmoothingConfig& smoothing,
                         int workers = 1);

/// -log p(word_i | word_{i-1}) in nats; word 0 is conditioned on <s>.
std::vector<double> bigram_surprisal(const BigramModel& model, std::span<const std::string> words);

/// unigrams.tsv, bigrams.tsv and smoothing.json.
void save_bigram(const BigramModel& model, const std::filesystem::path& dir);
BigramModel load_bigram(const std::filesystem::path& dir);

}  // namespace lenspsych
