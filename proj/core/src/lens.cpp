#include "lenspsych/lens.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"
#include "tensor_store.hpp"

namespace lenspsych {

namespace fs = std::filesystem;

std::string_view to_string(LensKind kind) { return kind == LensKind::logit ? "logit" : "tuned"; }

LensKind parse_lens_kind(std::string_view name) {
  if (name == "logit") return LensKind::logit;
  if (name == "tuned") return LensKind::tuned;
  throw ConfigError("unknown lens kind: " + std::string(name));
}

std::string_view to_string(KlDirection dir) {
  return dir == KlDirection::forward ? "forward" : "reverse";
}

KlDirection parse_kl_direction(std::string_view name) {
  if (name == "forward") return KlDirection::forward;
  if (name == "reverse") return KlDirection::reverse;
  throw ConfigError("unknown KL direction: " + std::string(name));
}

Translator Translator::identity(int layer, int d_model) {
  Translator t;
  t.layer = layer;
  t.weight = Matrix(d_model, d_model);
  for (int i = 0; i < d_model; ++i) t.weight(i, i) = 1.0f;
  t.bias.assign(d_model, 0.0f);
  return t;
}

TranslatorSet::TranslatorSet(int n_layers, int d_model, std::vector<Translator> translators)
    : n_layers_(n_layers),
      d_model_(d_model),
      translators_(std::move(translators)),
      final_identity_(Translator::identity(n_layers, d_model)) {
  if (translators_.size() != static_cast<std::size_t>(n_layers - 1))
    throw DataError("expected " + std::to_string(n_layers - 1) + " translators, got " +
                    std::to_string(translators_.size()));
  for (std::size_t i = 0; i < translators_.size(); ++i) {
    const auto& t = translators_[i];
    if (t.layer != static_cast<int>(i) + 1)
      throw DataError("translator for layer " + std::to_string(t.layer) + " out of order");
    if (t.weight.rows() != static_cast<std::size_t>(d_model) ||
        t.weight.cols() != static_cast<std::size_t>(d_model) ||
        t.bias.size() != static_cast<std::size_t>(d_model))
      throw DataError("translator for layer " + std::to_string(t.layer) + " has wrong shape");
    for (float v : t.weight.values())
      if (!std::isfinite(v)) throw DataError("non-finite translator weight at layer " + std::to_string(t.layer));
    for (float v : t.bias)
      if (!std::isfinite(v)) throw DataError("non-finite translator bias at layer " + std::to_string(t.layer));
  }
}

TranslatorSet TranslatorSet::identity(int n_layers, int d_model) {
  std::vector<Translator> ts;
  for (int l = 1; l < n_layers; ++l) ts.push_back(Translator::identity(l, d_model));
  return TranslatorSet(n_layers, d_model, std::move(ts));
}

const Translator& TranslatorSet::at(int layer) const {
  if (layer < 1 || layer > n_layers_)
    throw DataError("no translator for layer " + std::to_string(layer));
  if (layer == n_layers_) return final_identity_;
  return translators_[layer - 1];
}

void save_translators(const TranslatorSet& set, const fs::path& dir) {
  detail::TensorDirectory out;
  out.header["format"] = "lenspsych.tensors";
  out.header["version"] = 1;
  out.header["kind"] = "translators";
  out.header["n_layers"] = set.n_layers();
  out.header["d_model"] = set.d_model();
  out.header["identity_folded"] = true;
  out.header["kl_direction"] = std::string(to_string(set.direction));
  const auto d = static_cast<std::int64_t>(set.d_model());
  for (const auto& t : set.translators()) {
    const auto prefix = "translator." + std::to_string(t.layer);
    out.tensors[prefix + ".W"] = {{d, d}, {t.weight.values().begin(), t.weight.values().end()}};
    out.tensors[prefix + ".b"] = {{d}, t.bias};
  }
  detail::write_tensor_directory(dir, out);
}

TranslatorSet load_translators(const fs::path& dir, const ModelConfig& config) {
  auto contents = detail::read_tensor_directory(dir);
  const auto& h = contents.header;
  const int d = config.d_model;
  if (h.contains("d_model") && h["d_model"].get<int>() != d)
    throw DataError("translators were trained for d_model " + std::to_string(h["d_model"].get<int>()) +
                    ", model has " + std::to_string(d));
  if (h.contains("n_layers") && h["n_layers"].get<int>() != config.n_layers)
    throw DataError("translators were trained for " + std::to_string(h["n_layers"].get<int>()) +
                    " layers, model has " + std::to_string(config.n_layers));
  const bool folded = h.value("identity_folded", true);

  std::vector<Translator> ts;
  for (int l = 1; l < config.n_layers; ++l) {
    const auto prefix = "translator." + std::to_string(l);
    auto wi = contents.tensors.find(prefix + ".W");
    auto bi = contents.tensors.find(prefix + ".b");
    if (wi == contents.tensors.end()) throw DataError("missing tensor: " + prefix + ".W");
    if (bi == contents.tensors.end()) throw DataError("missing tensor: " + prefix + ".b");
    if (wi->second.shape != std::vector<std::int64_t>{d, d})
      throw DataError("shape mismatch for tensor " + prefix + ".W");
    if (bi->second.shape != std::vector<std::int64_t>{d})
      throw DataError("shape mismatch for tensor " + prefix + ".b");
    Translator t;
    t.layer = l;
    t.weight = Matrix(d, d);
    std::copy(wi->second.values.begin(), wi->second.values.end(), t.weight.values().begin());
    if (!folded)
      for (int i = 0; i < d; ++i) t.weight(i, i) += 1.0f;
    t.bias = bi->second.values;
    ts.push_back(std::move(t));
  }
  TranslatorSet set(config.n_layers, d, std::move(ts));
  if (h.contains("kl_direction")) set.direction = parse_kl_direction(h["kl_direction"].get<std::string>());
  return set;
}

// ---------------------------------------------------------------------------

std::vector<double> log_softmax(std::span<const float> logits) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (float v : logits) max_logit = std::max(max_logit, static_cast<double>(v));
  double total = 0.0;
  for (float v : logits) total += std::exp(static_cast<double>(v) - max_logit);
  const double log_z = max_logit + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = static_cast<double>(logits[j]) - log_z;
  return out;
}

std::vector<double> logit_lens(const ModelBundle& model, std::span<const float> hidden) {
  if (hidden.size() != static_cast<std::size_t>(model.config.d_model))
    throw DataError("hidden state has length " + std::to_string(hidden.size()) + ", expected " +
                    std::to_string(model.config.d_model));
  for (float v : hidden)
    if (!std::isfinite(v)) throw DataError("non-finite hidden state passed to logit lens");
  std::vector<float> logits(static_cast<std::size_t>(model.config.vocab_size));
  project_to_vocab(model, hidden, logits);
  return log_softmax(logits);
}

std::vector<double> tuned_lens(const ModelBundle& model, const Translator& translator,
                               std::span<const float> hidden) {
  const std::size_t d = model.config.d_model;
  if (translator.weight.rows() != d || translator.weight.cols() != d || translator.bias.size() != d ||
      hidden.size() != d)
    throw DataError("translator shape does not match model d_model " + std::to_string(d));
  std::vector<double> acc(translator.bias.begin(), translator.bias.end());
  for (std::size_t i = 0; i < d; ++i) {
    const double hi = hidden[i];
    const auto row = translator.weight.row(i);
    for (std::size_t k = 0; k < d; ++k) acc[k] += hi * row[k];
  }
  std::vector<float> translated(acc.begin(), acc.end());
  return logit_lens(model, translated);
}

// ---------------------------------------------------------------------------

SurprisalTable token_surprisals(const ModelBundle& model, LensKind lens,
                                const TranslatorSet* translators, std::span<const TokenId> ids,
                                WindowOptions window) {
  const int L = model.config.n_layers;
  if (lens == LensKind::tuned) {
    if (!translators) throw ConfigError("tuned lens requires translators");
    if (translators->n_layers() != L || translators->d_model() != model.config.d_model)
      throw DataError("translators do not match the model shape");
  }
  const int P = window.window > 0 ? std::min(window.window, model.config.max_positions)
                                  : model.config.max_positions;
  const int S = window.stride > 0 ? window.stride : std::max(1, P / 2);
  if (P < 2 || S >= P) throw ConfigError("sliding window needs 2 <= window and 1 <= stride < window");

  SurprisalTable table;
  table.n_layers = L;
  const std::size_t n = ids.size();
  auto& by_layer = table.tokens[lens];
  by_layer.assign(L, std::vector<double>(n >= 2 ? n - 1 : 0, 0.0));
  if (n < 2) return table;

  std::size_t start = 0;
  std::size_t scored_until = 1;  // next target index in ids
  while (true) {
    const std::size_t end = std::min(start + static_cast<std::size_t>(P), n);
    const auto stream = forward_capture(model, ids.subspan(start, end - start));
    for (std::size_t target = std::max(scored_until, start + 1); target < end; ++target) {
      const int local = static_cast<int>(target - 1 - start);
      for (int l = 1; l <= L; ++l) {
        const auto h = stream.state(l, local);
        const auto logp = lens == LensKind::logit ? logit_lens(model, h)
                                                  : tuned_lens(model, translators->at(l), h);
        by_layer[l - 1][target - 1] = -logp[static_cast<std::size_t>(ids[target])];
      }
    }
    scored_until = end;
    if (end == n) break;
    start += static_cast<std::size_t>(S);
  }
  return table;
}

void word_surprisals(SurprisalTable& table, const WordAlignment& alignment, int token_shift) {
  for (const auto& [lens, by_layer] : table.tokens) {
    auto& out = table.words[lens];
    out.assign(by_layer.size(), std::vector<double>(alignment.spans.size(), 0.0));
    for (std::size_t l = 0; l < by_layer.size(); ++l) {
      const auto& tok = by_layer[l];
      for (std::size_t w = 0; w < alignment.spans.size(); ++w) {
        const auto span = alignment.spans[w];
        double total = 0.0;
        for (std::size_t j = span.begin; j < span.end; ++j) {
          const long idx = static_cast<long>(j) + token_shift;
          if (idx < 0 || idx >= static_cast<long>(tok.size()))
            throw DataError("word " + std::to_string(w) + " spans tokens outside the scored range");
          total += tok[static_cast<std::size_t>(idx)];
        }
        out[l][w] = total;
      }
    }
  }
}

double perplexity(const ModelBundle& model, std::span<const TokenId> ids, int layer, LensKind lens,
                  const TranslatorSet* translators) {
  if (ids.size() < 2) throw DataError("perplexity needs at least two tokens");
  if (layer < 1 || layer > model.config.n_layers)
    throw DataError("layer " + std::to_string(layer) + " out of range");
  const auto table = token_surprisals(model, lens, translators, ids);
  const auto& s = table.tokens.at(lens)[layer - 1];
  double total = 0.0;
  for (double v : s) total += v;
  return std::exp(total / static_cast<double>(s.size()));
}

void write_surprisal_tsv(std::ostream& out, const SurprisalTable& table, int layer,
                         std::optional<LensKind> lens, bool header) {
  if (header) out << kSurprisalTsvHeader << '\n';
  auto emit = [&](const auto& by_lens, std::string_view unit, int offset) {
    for (const auto& [kind, by_layer] : by_lens) {
      if (lens && *lens != kind) continue;
      for (std::size_t l = 0; l < by_layer.size(); ++l) {
        if (layer != 0 && static_cast<int>(l) + 1 != layer) continue;
        for (std::size_t i = 0; i < by_layer[l].size(); ++i)
          out << table.seq_id << '\t' << l + 1 << '\t' << to_string(kind) << '\t' << unit << '\t'
              << static_cast<long>(i) + offset << '\t' << format_double(by_layer[l][i]) << '\n';
      }
    }
  };
  emit(table.tokens, "token", 0);
  emit(table.words, "word", table.first_word_index);
}

}  // namespace lenspsych
