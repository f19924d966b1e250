#include "lenspsych/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"

namespace lenspsych {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string encode_utf8(char32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xC0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    s += static_cast<char>(0xE0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    s += static_cast<char>(0xF0 | (cp >> 18));
    s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return s;
}

// Decodes one code point starting at i. Malformed input yields U+FFFD with length 1.
std::pair<char32_t, std::size_t> next_codepoint(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) {
    return i + k < s.size() && (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
  };
  auto byte = [&](std::size_t k) { return static_cast<char32_t>(s[i + k] & 0x3F); };
  if (c < 0x80) return {c, 1};
  if ((c & 0xE0) == 0xC0 && cont(1)) return {((c & 0x1F) << 6) | byte(1), 2};
  if ((c & 0xF0) == 0xE0 && cont(1) && cont(2))
    return {((c & 0x0F) << 12) | (byte(1) << 6) | byte(2), 3};
  if ((c & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3))
    return {((c & 0x07) << 18) | (byte(1) << 12) | (byte(2) << 6) | byte(3), 4};
  return {0xFFFD, 1};
}

struct ByteAlphabet {
  std::array<std::string, 256> to_unicode;
  std::map<std::string, unsigned char> to_byte;

  ByteAlphabet() {
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    char32_t extra = 256;
    for (int b = 0; b < 256; ++b) {
      const char32_t cp = printable[b] ? static_cast<char32_t>(b) : extra++;
      to_unicode[b] = encode_utf8(cp);
      to_byte[to_unicode[b]] = static_cast<unsigned char>(b);
    }
  }
};

const ByteAlphabet& byte_alphabet() {
  static const ByteAlphabet alphabet;
  return alphabet;
}

bool is_space_cp(char32_t cp) {
  switch (cp) {
    case ' ': case '\t': case '\n': case '\v': case '\f': case '\r':
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}
bool is_letter_cp(char32_t cp) {
  if (cp < 0x80) return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  return !is_space_cp(cp);
}
bool is_digit_cp(char32_t cp) { return cp >= '0' && cp <= '9'; }
bool is_other_cp(char32_t cp) { return !is_space_cp(cp) && !is_letter_cp(cp) && !is_digit_cp(cp); }

bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\v' || c == '\f' || c == '\r';
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<CharSpan> pretokenize(std::string_view text) {
  std::vector<CharSpan> out;
  const std::size_t n = text.size();
  std::size_t i = 0;

  auto run_of = [&](std::size_t start, auto pred) {
    std::size_t j = start;
    while (j < n) {
      auto [cp, len] = next_codepoint(text, j);
      if (!pred(cp)) break;
      j += len;
    }
    return j;
  };

  while (i < n) {
    if (text[i] == '\'') {
      bool matched = false;
      for (std::string_view suffix : {"s", "t", "re", "ve", "m", "ll", "d"}) {
        if (text.substr(i + 1, suffix.size()) == suffix) {
          out.push_back({i, i + 1 + suffix.size()});
          i += 1 + suffix.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }

    const std::size_t after_space = (text[i] == ' ') ? i + 1 : i;
    bool matched = false;
    for (auto pred : {&is_letter_cp, &is_digit_cp, &is_other_cp}) {
      const std::size_t end = run_of(after_space, pred);
      if (end > after_space) {
        out.push_back({i, end});
        i = end;
        matched = true;
        break;
      }
    }
    if (matched) continue;

    // Whitespace: \s+(?!\S) then \s+.
    const std::size_t ws_end = run_of(i, &is_space_cp);
    if (ws_end > i) {
      std::size_t end = ws_end;
      if (ws_end < n) {
        std::size_t last = i;
        for (std::size_t j = i; j < ws_end;) {
          last = j;
          j += next_codepoint(text, j).second;
        }
        if (last > i) end = last;
      }
      out.push_back({i, end});
      i = end;
      continue;
    }
    // Unreachable for well-formed classes; advance one code point to be safe.
    const std::size_t len = next_codepoint(text, i).second;
    out.push_back({i, i + len});
    i += len;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::size_t Tokenizer::PairHash::operator()(const std::pair<std::string, std::string>& p) const {
  const std::size_t h1 = std::hash<std::string>{}(p.first);
  const std::size_t h2 = std::hash<std::string>{}(p.second);
  return h1 ^ (h2 + 0x9e3779b97f4a7c15ULL + (h1 << 6) + (h1 >> 2));
}

Tokenizer Tokenizer::chars(std::optional<TokenId> bos) {
  Tokenizer t;
  t.kind_ = TokenizerKind::chars;
  t.byte_level_ = true;
  t.bos_ = bos;
  return t;
}

Tokenizer Tokenizer::bpe(std::map<std::string, TokenId> vocab, MergeList merges, bool byte_level,
                         std::optional<TokenId> bos, std::optional<TokenId> unk) {
  Tokenizer t;
  t.kind_ = TokenizerKind::bpe;
  t.byte_level_ = byte_level;
  t.bos_ = bos;
  t.unk_ = unk;

  if (vocab.empty()) throw DataError("tokenizer vocabulary is empty");
  t.id_to_token_.assign(vocab.size(), {});
  std::vector<bool> seen(vocab.size(), false);
  for (const auto& [token, id] : vocab) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size() || seen[id])
      throw DataError("tokenizer ids are not dense in [0, " + std::to_string(vocab.size()) +
                      "): offending token '" + token + "'");
    seen[id] = true;
    t.id_to_token_[id] = token;
  }
  for (auto special : {bos, unk})
    if (special && (*special < 0 || static_cast<std::size_t>(*special) >= vocab.size()))
      throw DataError("special token id out of range");

  // Merges must only reference base symbols or results of earlier merges.
  std::set<std::string> known;
  if (byte_level) {
    for (const auto& s : byte_alphabet().to_unicode) known.insert(s);
  }
  auto is_base = [&](const std::string& s) {
    if (byte_level) return known.contains(s);
    return !s.empty() && next_codepoint(s, 0).second == s.size();
  };
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto& [a, b] = merges[r];
    if (!(is_base(a) || known.contains(a)) || !(is_base(b) || known.contains(b)))
      throw DataError("merge " + std::to_string(r) + " (" + a + " " + b +
                      ") references a symbol not produced by earlier merges");
    known.insert(a + b);
    t.merge_rank_.emplace(merges[r], static_cast<int>(r));
  }
  t.vocab_ = std::move(vocab);
  t.merges_ = std::move(merges);
  return t;
}

std::size_t Tokenizer::vocab_size() const {
  if (kind_ == TokenizerKind::chars)
    return std::max<std::size_t>(256, bos_ ? static_cast<std::size_t>(*bos_) + 1 : 0);
  return vocab_.size();
}

std::string Tokenizer::token_string(TokenId id) const {
  if (kind_ == TokenizerKind::chars) return std::string(1, static_cast<char>(id & 0xFF));
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw DataError("token id " + std::to_string(id) + " out of range");
  return id_to_token_[id];
}

void Tokenizer::encode_piece(std::string_view text, std::size_t base, Encoding& out) const {
  std::vector<std::string> symbols;
  std::vector<std::size_t> lengths;
  if (byte_level_) {
    for (unsigned char c : text) {
      symbols.push_back(byte_alphabet().to_unicode[c]);
      lengths.push_back(1);
    }
  } else {
    for (std::size_t i = 0; i < text.size();) {
      const auto len = next_codepoint(text, i).second;
      symbols.emplace_back(text.substr(i, len));
      lengths.push_back(len);
      i += len;
    }
  }

  while (symbols.size() > 1) {
    int best = std::numeric_limits<int>::max();
    for (std::size_t k = 0; k + 1 < symbols.size(); ++k) {
      auto it = merge_rank_.find({symbols[k], symbols[k + 1]});
      if (it != merge_rank_.end()) best = std::min(best, it->second);
    }
    if (best == std::numeric_limits<int>::max()) break;
    const auto& [a, b] = merges_[best];
    std::vector<std::string> merged;
    std::vector<std::size_t> merged_len;
    for (std::size_t k = 0; k < symbols.size();) {
      if (k + 1 < symbols.size() && symbols[k] == a && symbols[k + 1] == b) {
        merged.push_back(a + b);
        merged_len.push_back(lengths[k] + lengths[k + 1]);
        k += 2;
      } else {
        merged.push_back(std::move(symbols[k]));
        merged_len.push_back(lengths[k]);
        ++k;
      }
    }
    symbols = std::move(merged);
    lengths = std::move(merged_len);
  }

  std::size_t pos = base;
  for (std::size_t k = 0; k < symbols.size(); ++k) {
    auto it = vocab_.find(symbols[k]);
    if (it != vocab_.end()) {
      out.ids.push_back(it->second);
      out.offsets.push_back({pos, pos + lengths[k]});
    } else if (byte_level_) {
      // Merged symbol absent from the vocabulary: fall back to its bytes.
      for (std::size_t j = 0; j < lengths[k]; ++j) {
        const auto c = static_cast<unsigned char>(text[pos - base + j]);
        auto bt = vocab_.find(byte_alphabet().to_unicode[c]);
        if (bt == vocab_.end())
          throw DataError("byte-level vocabulary lacks the token for byte " + std::to_string(c));
        out.ids.push_back(bt->second);
        out.offsets.push_back({pos + j, pos + j + 1});
      }
    } else if (unk_) {
      out.ids.push_back(*unk_);
      out.offsets.push_back({pos, pos + lengths[k]});
    } else {
      throw DataError("symbol '" + symbols[k] + "' is not in the vocabulary and no unk token is set");
    }
    pos += lengths[k];
  }
}

Encoding Tokenizer::encode(std::string_view text) const {
  Encoding out;
  if (kind_ == TokenizerKind::chars) {
    for (std::size_t i = 0; i < text.size(); ++i) {
      out.ids.push_back(static_cast<unsigned char>(text[i]));
      out.offsets.push_back({i, i + 1});
    }
    return out;
  }
  for (const auto& piece : pretokenize(text))
    encode_piece(text.substr(piece.begin, piece.end - piece.begin), piece.begin, out);
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  if (kind_ == TokenizerKind::chars) {
    for (auto id : ids) out += static_cast<char>(id & 0xFF);
    return out;
  }
  std::string joined;
  for (auto id : ids) joined += token_string(id);
  if (!byte_level_) return joined;
  const auto& table = byte_alphabet().to_byte;
  for (std::size_t i = 0; i < joined.size();) {
    const auto len = next_codepoint(joined, i).second;
    auto it = table.find(joined.substr(i, len));
    if (it != table.end())
      out += static_cast<char>(it->second);
    else
      out += joined.substr(i, len);
    i += len;
  }
  return out;
}

// ---------------------------------------------------------------------------

Tokenizer load_tokenizer(const fs::path& dir) {
  const fs::path flags_path = dir / "tokenizer.json";
  if (!fs::exists(flags_path)) throw DataError("missing tokenizer flags file: " + flags_path.string());
  json flags;
  try {
    flags = json::parse(read_file(flags_path));
  } catch (const json::exception& e) {
    throw DataError("malformed tokenizer.json: " + std::string(e.what()));
  }
  const auto type = flags.value("type", std::string("bpe"));
  std::optional<TokenId> bos;
  if (flags.contains("bos_id") && !flags["bos_id"].is_null()) bos = flags["bos_id"].get<TokenId>();

  if (type == "chars") return Tokenizer::chars(bos);
  if (type != "bpe") throw DataError("unsupported tokenizer type: " + type);

  std::map<std::string, TokenId> vocab;
  try {
    vocab = json::parse(read_file(dir / "vocab.json")).get<std::map<std::string, TokenId>>();
  } catch (const json::exception& e) {
    throw DataError("malformed vocab.json: " + std::string(e.what()));
  }

  Tokenizer::MergeList merges;
  std::istringstream lines(read_file(dir / "merges.txt"));
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.starts_with("#version")) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos)
      throw DataError("malformed merge line: " + line);
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }

  auto lookup = [&](const char* key) -> std::optional<TokenId> {
    if (!flags.contains(key) || flags[key].is_null()) return std::nullopt;
    const auto tok = flags[key].get<std::string>();
    auto it = vocab.find(tok);
    if (it == vocab.end()) throw DataError(std::string(key) + " '" + tok + "' is not in vocab.json");
    return it->second;
  };
  if (!bos) bos = lookup("bos_token");
  const auto unk = lookup("unk_token");
  return Tokenizer::bpe(std::move(vocab), std::move(merges), flags.value("byte_level", true), bos,
                        unk);
}

void save_tokenizer(const Tokenizer& tok, const fs::path& dir) {
  fs::create_directories(dir);
  json flags;
  if (tok.kind() == TokenizerKind::chars) {
    flags["type"] = "chars";
    flags["byte_level"] = true;
  } else {
    flags["type"] = "bpe";
    flags["byte_level"] = tok.byte_level();
    flags["prefix_space_marker"] = tok.byte_level() ? "Ġ" : " ";
    json vocab = tok.vocab();
    write_file_atomic(dir / "vocab.json", vocab.dump() + "\n");
    std::string merges = "#version: 0.2\n";
    for (const auto& [a, b] : tok.merges()) merges += a + " " + b + "\n";
    write_file_atomic(dir / "merges.txt", merges);
  }
  flags["bos_id"] = tok.bos_id() ? json(*tok.bos_id()) : json(nullptr);
  write_file_atomic(dir / "tokenizer.json", flags.dump(2) + "\n");
}

Tokenizer learn_bpe(std::span<const std::string> corpus, int n_merges) {
  const auto& alphabet = byte_alphabet();
  std::map<std::vector<std::string>, long> words;
  for (const auto& line : corpus) {
    for (const auto& piece : pretokenize(line)) {
      std::vector<std::string> symbols;
      for (std::size_t i = piece.begin; i < piece.end; ++i)
        symbols.push_back(alphabet.to_unicode[static_cast<unsigned char>(line[i])]);
      ++words[symbols];
    }
  }

  Tokenizer::MergeList merges;
  for (int m = 0; m < n_merges; ++m) {
    std::map<std::pair<std::string, std::string>, long> pairs;
    for (const auto& [symbols, count] : words)
      for (std::size_t k = 0; k + 1 < symbols.size(); ++k) pairs[{symbols[k], symbols[k + 1]}] += count;
    if (pairs.empty()) break;
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [a, b] = best->first;
    merges.push_back(best->first);

    std::map<std::vector<std::string>, long> next;
    for (const auto& [symbols, count] : words) {
      std::vector<std::string> merged;
      for (std::size_t k = 0; k < symbols.size();) {
        if (k + 1 < symbols.size() && symbols[k] == a && symbols[k + 1] == b) {
          merged.push_back(a + b);
          k += 2;
        } else {
          merged.push_back(symbols[k++]);
        }
      }
      next[merged] += count;
    }
    words = std::move(next);
  }

  std::map<std::string, TokenId> vocab;
  for (int b = 0; b < 256; ++b) vocab[alphabet.to_unicode[b]] = b;
  TokenId next_id = 256;
  for (const auto& [a, b] : merges)
    if (vocab.emplace(a + b, next_id).second) ++next_id;
  const TokenId bos = next_id;
  vocab["<|endoftext|>"] = bos;
  return Tokenizer::bpe(std::move(vocab), std::move(merges), true, bos);
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_ascii_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_ascii_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

WordAlignment align_words(std::span<const std::string> words, std::span<const CharSpan> offsets,
                          std::string_view text) {
  std::vector<CharSpan> word_bytes;
  for (std::size_t i = 0; i < text.size();) {
    while (i < text.size() && is_ascii_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_ascii_space(text[i])) ++i;
    if (i > start) word_bytes.push_back({start, i});
  }
  if (word_bytes.size() != words.size())
    throw DataError("word list has " + std::to_string(words.size()) +
                    " entries but the text splits into " + std::to_string(word_bytes.size()));
  for (std::size_t w = 0; w < words.size(); ++w)
    if (text.substr(word_bytes[w].begin, word_bytes[w].end - word_bytes[w].begin) != words[w])
      throw DataError("word " + std::to_string(w) + " '" + words[w] +
                      "' does not match the text at that position");

  WordAlignment out;
  out.words.assign(words.begin(), words.end());
  out.spans.assign(words.size(), TokenSpan{0, 0});
  std::vector<bool> started(words.size(), false);
  std::size_t current = 0;
  // Whitespace-only tokens carry the next word's leading space.
  std::optional<std::size_t> pending;

  for (std::size_t k = 0; k < offsets.size(); ++k) {
    const auto [b, e] = offsets[k];
    if (b > e || e > text.size()) throw DataError("token " + std::to_string(k) + " offsets out of range");
    std::size_t p = b;
    while (p < e && is_ascii_space(text[p])) ++p;
    if (p == e) {
      if (!pending) pending = k;
      continue;
    }

    auto it = std::upper_bound(word_bytes.begin(), word_bytes.end(), p,
                               [](std::size_t v, const CharSpan& s) { return v < s.begin; });
    if (it == word_bytes.begin()) throw DataError("token " + std::to_string(k) + " precedes every word");
    const std::size_t w = static_cast<std::size_t>(std::distance(word_bytes.begin(), it)) - 1;
    if (p >= word_bytes[w].end || e > word_bytes[w].end)
      throw DataError("token " + std::to_string(k) + " straddles the boundary of word " +
                      std::to_string(w) + " '" + words[w] + "'");
    if (w < current) throw DataError("token offsets are not monotone at token " + std::to_string(k));
    if (!started[w]) {
      started[w] = true;
      out.spans[w] = {pending.value_or(k), k + 1};
    } else {
      if (pending) throw DataError("whitespace token inside word " + std::to_string(w) + " '" + words[w] + "'");
      if (out.spans[w].end != k)
        throw DataError("tokens of word " + std::to_string(w) + " are not contiguous");
      out.spans[w].end = k + 1;
    }
    current = w;
    pending.reset();
  }
  for (std::size_t w = 0; w < words.size(); ++w)
    if (!started[w])
      throw DataError("word " + std::to_string(w) + " '" + words[w] + "' received no tokens");
  return out;
}

}  // namespace lenspsych
