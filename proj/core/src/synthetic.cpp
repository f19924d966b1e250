#include "lenspsych/synthetic.hpp"

#include <array>
#include <cmath>

#include "lenspsych/errors.hpp"
#include "lenspsych/tokenizer.hpp"
#include "random.hpp"

namespace lenspsych {

namespace {

constexpr std::array kDeterminers = {"the", "a", "every", "some", "this", "that", "her", "his"};
constexpr std::array kAdjectives = {"old", "small", "quiet", "bright", "tired", "curious", "heavy",
                                    "young", "strange", "careful", "distant", "wooden"};
constexpr std::array kNouns = {"cat",     "farmer", "teacher", "river",  "letter", "garden",
                               "window",  "doctor", "child",   "market", "bridge", "lamp",
                               "story",   "train",  "soldier", "island", "kitchen", "painter",
                               "village", "engine", "mountain", "secret"};
constexpr std::array kVerbs = {"watched", "found", "carried", "opened", "remembered", "painted",
                               "followed", "visited", "answered", "noticed", "repaired", "described"};
constexpr std::array kPrepositions = {"near", "behind", "under", "beside", "across", "inside"};
constexpr std::array kAdverbs = {"Yesterday,", "Later,", "Suddenly,", "Meanwhile,", "Often,"};
constexpr std::array kEndings = {".", ".", ".", "!", "?"};

template <std::size_t N>
const char* pick(detail::Rng& rng, const std::array<const char*, N>& options) {
  return options[rng.below(N)];
}

std::string noun_phrase(detail::Rng& rng) {
  std::string out = pick(rng, kDeterminers);
  if (rng.uniform() < 0.5) out += std::string(" ") + pick(rng, kAdjectives);
  out += std::string(" ") + pick(rng, kNouns);
  return out;
}

}  // namespace

std::string synthetic_pos(std::string_view word) {
  const auto key = FrequencyTable::normalize(word);
  auto in = [&](const auto& list) {
    for (std::string_view w : list)
      if (FrequencyTable::normalize(w) == key) return true;
    return false;
  };
  if (key == "and") return "CC";
  if (in(kDeterminers)) return key == "her" || key == "his" ? "PRP$" : "DT";
  if (in(kAdjectives)) return "JJ";
  if (in(kVerbs)) return "VBD";
  if (in(kPrepositions)) return "IN";
  if (in(kAdverbs)) return "RB";
  return "NN";
}

std::vector<std::string> synthetic_sentences(std::uint64_t seed, std::size_t count) {
  detail::Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::string s;
    if (rng.uniform() < 0.25) s = std::string(pick(rng, kAdverbs)) + " ";
    std::string subject = noun_phrase(rng);
    if (s.empty()) subject[0] = static_cast<char>(subject[0] - 'a' + 'A');
    s += subject + " " + pick(rng, kVerbs) + " " + noun_phrase(rng);
    if (rng.uniform() < 0.5) s += std::string(" ") + pick(rng, kPrepositions) + " " + noun_phrase(rng);
    if (rng.uniform() < 0.3) s += std::string(", and ") + noun_phrase(rng) + " " + pick(rng, kVerbs) + " " +
                                  noun_phrase(rng);
    s += pick(rng, kEndings);
    // ", and" glues the comma onto the previous word.
    std::string fixed;
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (s[k] == ',' && !fixed.empty() && fixed.back() == ' ') fixed.pop_back();
      fixed += s[k];
    }
    out.push_back(std::move(fixed));
  }
  return out;
}

FrequencyTable frequency_from_corpus(std::span<const std::string> sentences) {
  std::map<std::string, double> counts;
  double total = 0.0;
  for (const auto& s : sentences)
    for (const auto& w : split_words(s)) {
      counts[FrequencyTable::normalize(w)] += 1.0;
      total += 1.0;
    }
  FrequencyTable table;
  for (const auto& [w, c] : counts) table.set(w, c / total * 1e6);
  return table;
}

std::vector<WordRecord> planted_reading_records(std::span<const std::string> sentences,
                                                std::span<const std::vector<double>> surprisal,
                                                const PlantedCostOptions& options, std::uint64_t seed) {
  if (sentences.size() != surprisal.size())
    throw DataError("planted costs need one surprisal vector per sentence");
  if (!(options.target_r2 > 0.0 && options.target_r2 < 1.0))
    throw ConfigError("target R^2 must lie in (0, 1)");
  std::vector<WordRecord> out;
  std::vector<double> signal;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto words = split_words(sentences[i]);
    if (words.size() != surprisal[i].size())
      throw DataError("sentence " + std::to_string(i) + " has " + std::to_string(words.size()) +
                      " words but " + std::to_string(surprisal[i].size()) + " surprisals");
    for (std::size_t w = 0; w < words.size(); ++w) {
      WordRecord r;
      r.dataset_id = options.dataset_id;
      r.stimuli_id = options.dataset_id;
      r.seq_id = "s" + std::to_string(i + 1);
      r.word_index = static_cast<int>(w);
      r.word = words[w];
      r.measure = options.measure;
      const double s = options.surprisal_coef * surprisal[i][w] +
                       options.length_coef * static_cast<double>(utf8_length(words[w]));
      signal.push_back(s);
      r.cost = s;
      out.push_back(std::move(r));
    }
  }
  double mean = 0.0;
  for (double s : signal) mean += s;
  mean /= static_cast<double>(std::max<std::size_t>(1, signal.size()));
  double var = 0.0;
  for (double s : signal) var += (s - mean) * (s - mean);
  var /= static_cast<double>(std::max<std::size_t>(1, signal.size()));
  const double sigma = std::sqrt(var * (1.0 - options.target_r2) / options.target_r2);
  detail::Rng rng(seed);
  for (auto& r : out) r.cost = options.intercept + r.cost + sigma * rng.normal();
  return out;
}

std::vector<SettingRow> planted_settings(std::uint64_t seed, const PlantedSettingsOptions& options) {
  detail::Rng rng(seed);
  auto effects = [&](const std::vector<std::string>& levels) {
    std::map<std::string, double> e;
    for (const auto& l : levels) e[l] = rng.normal();
    return e;
  };
  const auto stim = effects(options.stimuli);
  std::vector<std::string> model_names, measures;
  for (const auto& [m, L] : options.models) model_names.push_back(m);
  for (const auto& [m, s] : options.measure_slope) measures.push_back(m);
  const auto model = effects(model_names);
  const auto lens = effects(options.lenses);
  const auto measure = effects(measures);

  std::vector<SettingRow> rows;
  for (const auto& s : options.stimuli)
    for (const auto& [m, L] : options.models)
      for (const auto& l : options.lenses)
        for (const auto& [meas, slope] : options.measure_slope)
          for (int layer = 1; layer <= L; ++layer) {
            SettingRow r;
            r.stimuli = s;
            r.model = m;
            r.lens = l;
            r.measure = meas;
            r.layer_depth = relative_depth(layer, L);
            r.delta_ll = stim.at(s) + model.at(m) + lens.at(l) + measure.at(meas) +
                         slope * r.layer_depth + options.noise * rng.normal();
            rows.push_back(std::move(r));
          }
  return rows;
}

}  // namespace lenspsych
