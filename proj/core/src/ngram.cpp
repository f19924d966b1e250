#include "lenspsych/ngram.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lenspsych/corpus.hpp"
#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"
#include "lenspsych/tokenizer.hpp"

namespace lenspsych {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(Smoothing s) { return s == Smoothing::add_k ? "add_k" : "kneser_ney"; }

Smoothing parse_smoothing(std::string_view name) {
  if (name == "add_k" || name == "add-k") return Smoothing::add_k;
  if (name == "kneser_ney" || name == "kn") return Smoothing::kneser_ney;
  throw ConfigError("unknown smoothing: " + std::string(name));
}

BigramModel::BigramModel(SmoothingConfig smoothing,
                         std::map<std::pair<std::string, std::string>, std::int64_t> bigrams,
                         std::vector<std::string> vocabulary)
    : smoothing_(smoothing), bigrams_(std::move(bigrams)), vocabulary_(std::move(vocabulary)) {
  if (smoothing_.kind == Smoothing::add_k && !(smoothing_.k > 0.0))
    throw ConfigError("add-k smoothing needs k > 0");
  if (smoothing_.kind == Smoothing::kneser_ney && !(smoothing_.discount > 0.0 && smoothing_.discount < 1.0))
    throw ConfigError("Kneser-Ney discount must lie in (0, 1)");
  if (std::find(vocabulary_.begin(), vocabulary_.end(), kUnknown) == vocabulary_.end())
    vocabulary_.emplace_back(kUnknown);
  std::sort(vocabulary_.begin(), vocabulary_.end());
  vocabulary_.erase(std::unique(vocabulary_.begin(), vocabulary_.end()), vocabulary_.end());
  for (const auto& [key, c] : bigrams_) {
    const auto& [v, w] = key;
    if (c <= 0) throw DataError("bigram count must be positive: " + v + " " + w);
    if (!std::binary_search(vocabulary_.begin(), vocabulary_.end(), w))
      throw DataError("bigram target outside vocabulary: " + w);
    context_total_[v] += c;
    context_types_[v] += 1;
    target_total_[w] += c;
    if (continuation_[w]++ == 0) ++continuation_types_;
    ++continuation_total_;
  }
}

std::string BigramModel::key(std::string_view word) const {
  if (word == kStart) return std::string(kStart);
  std::string k = smoothing_.normalize ? FrequencyTable::normalize(word) : std::string(word);
  if (!std::binary_search(vocabulary_.begin(), vocabulary_.end(), k)) return std::string(kUnknown);
  return k;
}

std::int64_t BigramModel::count(std::string_view context, std::string_view word) const {
  auto it = bigrams_.find({std::string(context), std::string(word)});
  return it == bigrams_.end() ? 0 : it->second;
}

std::int64_t BigramModel::context_count(std::string_view context) const {
  auto it = context_total_.find(std::string(context));
  return it == context_total_.end() ? 0 : it->second;
}

std::int64_t BigramModel::unigram_count(std::string_view word) const {
  auto it = target_total_.find(std::string(word));
  return it == target_total_.end() ? 0 : it->second;
}

double BigramModel::continuation_prob(std::string_view word) const {
  const double V = static_cast<double>(vocabulary_.size());
  if (continuation_total_ == 0) return 1.0 / V;
  const double D = smoothing_.discount;
  auto it = continuation_.find(std::string(word));
  const double n = it == continuation_.end() ? 0.0 : static_cast<double>(it->second);
  const double total = static_cast<double>(continuation_total_);
  return std::max(n - D, 0.0) / total + D * static_cast<double>(continuation_types_) / total / V;
}

double BigramModel::prob(std::string_view context_raw, std::string_view word_raw) const {
  const std::string v = key(context_raw), w = key(word_raw);
  const double V = static_cast<double>(vocabulary_.size());
  const double cv = static_cast<double>(context_count(v));
  const double cvw = static_cast<double>(count(v, w));
  if (smoothing_.kind == Smoothing::add_k) return (cvw + smoothing_.k) / (cv + smoothing_.k * V);
  const double lower = continuation_prob(w);
  if (cv == 0.0) return lower;
  const double D = smoothing_.discount;
  const double types = static_cast<double>(context_types_.at(v));
  return std::max(cvw - D, 0.0) / cv + D * types / cv * lower;
}

double BigramModel::log_prob(std::string_view context, std::string_view word) const {
  return std::log(prob(context, word));
}

namespace {

using Counts = std::map<std::pair<std::string, std::string>, std::int64_t>;

void count_shard(std::span<const std::string> sentences, bool normalize, Counts& out) {
  for (const auto& s : sentences) {
    std::string prev(BigramModel::kStart);
    for (auto& raw : split_words(s)) {
      std::string w = normalize ? FrequencyTable::normalize(raw) : raw;
      out[{prev, w}] += 1;
      prev = std::move(w);
    }
  }
}

}  // namespace

BigramModel train_bigram(std::span<const std::string> sentences, const SmoothingConfig& smoothing,
                         int workers) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(std::max<std::size_t>(1, sentences.size()))));
  std::vector<Counts> shards(static_cast<std::size_t>(workers));
  const std::size_t chunk = (sentences.size() + workers - 1) / static_cast<std::size_t>(workers);
  std::vector<std::thread> pool;
  for (int i = 0; i < workers; ++i) {
    const std::size_t b = std::min(sentences.size(), static_cast<std::size_t>(i) * chunk);
    const std::size_t e = std::min(sentences.size(), b + chunk);
    pool.emplace_back(count_shard, sentences.subspan(b, e - b), smoothing.normalize, std::ref(shards[i]));
  }
  for (auto& t : pool) t.join();

  Counts merged;
  for (auto& shard : shards)
    for (auto& [k, c] : shard) merged[k] += c;
  if (merged.empty()) throw DataError("bigram training corpus contains no words");

  std::vector<std::string> vocab;
  for (const auto& [k, c] : merged) vocab.push_back(k.second);
  return BigramModel(smoothing, std::move(merged), std::move(vocab));
}

std::vector<double> bigram_surprisal(const BigramModel& model, std::span<const std::string> words) {
  if (words.empty()) throw DataError("bigram surprisal needs at least one word");
  std::vector<double> out;
  out.reserve(words.size());
  std::string_view prev = BigramModel::kStart;
  for (const auto& w : words) {
    out.push_back(-model.log_prob(prev, w));
    prev = w;
  }
  return out;
}

void save_bigram(const BigramModel& model, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream uni, bi;
  uni << "word\tcount\n";
  for (const auto& w : model.vocabulary()) uni << w << '\t' << model.unigram_count(w) << '\n';
  bi << "context\tword\tcount\n";
  for (const auto& [k, c] : model.bigrams()) bi << k.first << '\t' << k.second << '\t' << c << '\n';
  const auto& s = model.smoothing();
  json header = {{"format", "lenspsych.bigram"},
                 {"version", 1},
                 {"smoothing", std::string(to_string(s.kind))},
                 {"k", s.k},
                 {"discount", s.discount},
                 {"normalize", s.normalize},
                 {"vocab_size", model.vocab_size()},
                 {"bigram_types", model.bigrams().size()}};
  write_file_atomic(dir / "unigrams.tsv", uni.str());
  write_file_atomic(dir / "bigrams.tsv", bi.str());
  write_file_atomic(dir / "smoothing.json", header.dump(2) + "\n");
}

BigramModel load_bigram(const fs::path& dir) {
  json header;
  try {
    header = json::parse(read_file(dir / "smoothing.json"));
  } catch (const json::exception& e) {
    throw DataError("bad smoothing.json in " + dir.string() + ": " + e.what());
  }
  SmoothingConfig s;
  s.kind = parse_smoothing(header.value("smoothing", "kneser_ney"));
  s.k = header.value("k", 1.0);
  s.discount = header.value("discount", 0.75);
  s.normalize = header.value("normalize", true);

  auto parse_count = [](const std::string& text, const std::string& file, std::size_t line) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || p != text.data() + text.size())
      throw DataError(file + " line " + std::to_string(line) + ": bad count '" + text + "'");
    return v;
  };

  std::vector<std::string> vocab;
  {
    std::istringstream in(read_file(dir / "unigrams.tsv"));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (++n == 1 || line.empty()) continue;
      auto f = split_tabs(line);
      if (f.size() != 2) throw DataError("unigrams.tsv line " + std::to_string(n) + ": expected 2 fields");
      parse_count(f[1], "unigrams.tsv", n);
      vocab.push_back(f[0]);
    }
  }
  Counts bigrams;
  {
    std::istringstream in(read_file(dir / "bigrams.tsv"));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (++n == 1 || line.empty()) continue;
      auto f = split_tabs(line);
      if (f.size() != 3) throw DataError("bigrams.tsv line " + std::to_string(n) + ": expected 3 fields");
      bigrams[{f[0], f[1]}] = parse_count(f[2], "bigrams.tsv", n);
    }
  }
  return BigramModel(s, std::move(bigrams), std::move(vocab));
}

}  // namespace lenspsych
