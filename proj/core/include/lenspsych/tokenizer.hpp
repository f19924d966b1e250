#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lenspsych/model.hpp"

namespace lenspsych {

/// Half-open byte range [begin, end) into the encoded text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const CharSpan&) const = default;
};

/// Half-open token index range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const TokenSpan&) const = default;
};

struct Encoding {
  std::vector<TokenId> ids;
  std::vector<CharSpan> offsets;
};

enum class TokenizerKind {
  chars,  // one token per byte, id == byte value
  bpe,
};

class Tokenizer {
 public:
  using MergeList = std::vector<std::pair<std::string, std::string>>;

  /// Trivial byte tokenizer for toy models; needs a vocabulary of at least 256.
  static Tokenizer chars(std::optional<TokenId> bos = std::nullopt);

  /// GPT-2 style BPE. In byte-level mode vocabulary strings use the GPT-2
  /// byte-to-unicode alphabet ("Ġ" marks a leading space).
  static Tokenizer bpe(std::map<std::string, TokenId> vocab, MergeList merges, bool byte_level,
                       std::optional<TokenId> bos = std::nullopt,
                       std::optional<TokenId> unk = std::nullopt);

  TokenizerKind kind() const { return kind_; }
  bool byte_level() const { return byte_level_; }
  std::optional<TokenId> bos_id() const { return bos_; }
  std::size_t vocab_size() const;
  const std::map<std::string, TokenId>& vocab() const { return vocab_; }
  const MergeList& merges() const { return merges_; }

  Encoding encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// Vocabulary string for a token id (byte-level alphabet in BPE mode).
  std::string token_string(TokenId id) const;

 private:
  struct PairHash {
    std::size_t operator()(const std::pair<std::string, std::string>& p) const;
  };

  void encode_piece(std::string_view text, std::size_t base, Encoding& out) const;

  TokenizerKind kind_ = TokenizerKind::chars;
  bool byte_level_ = true;
  std::optional<TokenId> bos_;
  std::optional<TokenId> unk_;
  std::map<std::string, TokenId> vocab_;
  std::vector<std::string> id_to_token_;
  MergeList merges_;
  std::unordered_map<std::pair<std::string, std::string>, int, PairHash> merge_rank_;
};

/// Reads vocab.json + merges.txt + tokenizer.json (flags) from a bundle directory.
Tokenizer load_tokenizer(const std::filesystem::path& dir);
void save_tokenizer(const Tokenizer& tok, const std::filesystem::path& dir);

/// Learns a byte-level BPE from a small corpus (ties broken by the
/// lexicographically smallest pair). Byte tokens take ids 0..255; merges follow.
Tokenizer learn_bpe(std::span<const std::string> corpus, int n_merges);

/// GPT-2 pre-tokenisation into byte spans. Non-ASCII code points are treated
/// as letters; only ASCII digits count as numbers.
std::vector<CharSpan> pretokenize(std::string_view text);

struct WordAlignment {
  std::vector<std::string> words;
  std::vector<TokenSpan> spans;
};

/// Maximal runs of non-whitespace, punctuation attached.
std::vector<std::string> split_words(std::string_view text);

/// Assigns each token to the word containing its first non-space byte.
/// Whitespace-only tokens belong to no word. Throws DataError when a token
/// straddles a word boundary or a word receives no token.
WordAlignment align_words(std::span<const std::string> words, std::span<const CharSpan> offsets,
                          std::string_view text);

}  // namespace lenspsych
