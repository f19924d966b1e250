#include "lenspsych/run_config.hpp"

#include <set>

#include "json.hpp"
#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"

namespace lenspsych {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(LensSelection s) {
  switch (s) {
    case LensSelection::logit: return "logit";
    case LensSelection::tuned: return "tuned";
    case LensSelection::both: return "both";
  }
  return "?";
}

LensSelection parse_lens_selection(std::string_view name) {
  if (name == "logit") return LensSelection::logit;
  if (name == "tuned") return LensSelection::tuned;
  if (name == "both") return LensSelection::both;
  throw ConfigError("unknown lens selection: " + std::string(name) + " (expected logit, tuned or both)");
}

std::vector<LensKind> RunConfig::lenses() const {
  switch (lens) {
    case LensSelection::logit: return {LensKind::logit};
    case LensSelection::tuned: return {LensKind::tuned};
    case LensSelection::both: return {LensKind::logit, LensKind::tuned};
  }
  return {};
}

const ModelEntry& RunConfig::model(std::string_view id) const {
  for (const auto& m : models)
    if (m.id == id) return m;
  throw ConfigError("no model named " + std::string(id) + " in config");
}

namespace {

void check_keys(const json& obj, const std::string& where, std::set<std::string> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : obj.items())
    if (!allowed.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <typename T>
T get(const json& obj, const char* key, const std::string& where, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

std::string require_string(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(where + " lacks required key '" + key + "'");
  return get<std::string>(obj, key, where, "");
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const fs::path& config_dir) {
  json doc;
  try {
    doc = json::parse(text, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, "config",
             {"models", "datasets", "frequency", "frequency_floor", "lens", "clause_final", "out_dir",
              "seed", "workers", "window", "exclude_incomplete", "lens_training", "ngram",
              "reference_model"});
  RunConfig c;
  c.config_dir = config_dir;

  if (!doc.contains("models") || !doc["models"].is_array() || doc["models"].empty())
    throw ConfigError("config needs a non-empty 'models' list");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < doc["models"].size(); ++i) {
    const auto& m = doc["models"][i];
    const std::string where = "models[" + std::to_string(i) + "]";
    check_keys(m, where, {"id", "bundle", "family", "param_count", "translators"});
    ModelEntry e;
    e.id = require_string(m, "id", where);
    if (e.id.empty() || e.id.find_first_of("/\\\t ") != std::string::npos)
      throw ConfigError(where + ".id must be a non-empty name without spaces or slashes");
    if (!ids.insert(e.id).second) throw ConfigError("duplicate model id " + e.id);
    e.bundle = resolve(config_dir, require_string(m, "bundle", where));
    e.family = get<std::string>(m, "family", where, e.id);
    e.param_count = get<double>(m, "param_count", where, 0.0);
    e.translators = get<std::string>(m, "translators", where, "trained");
    if (e.translators != "trained" && e.translators != "identity")
      e.translators = resolve(config_dir, e.translators).string();
    c.models.push_back(std::move(e));
  }

  ids.clear();
  if (doc.contains("datasets")) {
    if (!doc["datasets"].is_array()) throw ConfigError("'datasets' must be a list");
    for (std::size_t i = 0; i < doc["datasets"].size(); ++i) {
      const auto& d = doc["datasets"][i];
      const std::string where = "datasets[" + std::to_string(i) + "]";
      check_keys(d, where, {"id", "path", "measure", "stimuli"});
      DatasetEntry e;
      e.id = require_string(d, "id", where);
      if (e.id.empty() || e.id.find_first_of("/\\\t ") != std::string::npos)
        throw ConfigError(where + ".id must be a non-empty name without spaces or slashes");
      if (!ids.insert(e.id).second) throw ConfigError("duplicate dataset id " + e.id);
      e.path = resolve(config_dir, require_string(d, "path", where));
      if (d.contains("measure")) {
        try {
          e.measure = parse_measure(get<std::string>(d, "measure", where, ""));
        } catch (const DataError& err) {
          throw ConfigError(where + ": " + err.what());
        }
      }
      e.stimuli = get<std::string>(d, "stimuli", where, e.id);
      c.datasets.push_back(std::move(e));
    }
  }

  if (doc.contains("frequency")) c.frequency = resolve(config_dir, get<std::string>(doc, "frequency", "config", ""));
  c.frequency_floor = get<double>(doc, "frequency_floor", "config", 0.01);
  if (!(c.frequency_floor > 0.0)) throw ConfigError("frequency_floor must be positive");
  c.lens = parse_lens_selection(get<std::string>(doc, "lens", "config", "logit"));
  c.clause_final = parse_clause_final_mode(get<std::string>(doc, "clause_final", "config", "off"));
  c.out_dir = resolve(config_dir, get<std::string>(doc, "out_dir", "config", "out"));
  c.seed = get<std::uint64_t>(doc, "seed", "config", 0);
  c.workers = get<int>(doc, "workers", "config", 1);
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  c.exclude_incomplete = get<bool>(doc, "exclude_incomplete", "config", true);

  if (doc.contains("window")) {
    const auto& w = doc["window"];
    check_keys(w, "window", {"size", "stride"});
    c.window.window = get<int>(w, "size", "window", 0);
    c.window.stride = get<int>(w, "stride", "window", 0);
    if (c.window.window < 0 || c.window.stride < 0) throw ConfigError("window size/stride must be >= 0");
  }

  if (doc.contains("lens_training")) {
    const auto& t = doc["lens_training"];
    check_keys(t, "lens_training",
               {"corpus", "steps", "batch", "lr", "cosine", "validation_fraction", "eval_every", "direction"});
    if (t.contains("corpus")) c.lens_corpus = resolve(config_dir, get<std::string>(t, "corpus", "lens_training", ""));
    auto& o = c.lens_training;
    o.steps = get<int>(t, "steps", "lens_training", o.steps);
    o.batch_size = get<int>(t, "batch", "lens_training", o.batch_size);
    o.learning_rate = get<double>(t, "lr", "lens_training", o.learning_rate);
    o.cosine_decay = get<bool>(t, "cosine", "lens_training", o.cosine_decay);
    o.validation_fraction = get<double>(t, "validation_fraction", "lens_training", o.validation_fraction);
    o.eval_every = get<int>(t, "eval_every", "lens_training", o.eval_every);
    o.direction = parse_kl_direction(get<std::string>(t, "direction", "lens_training", "forward"));
  }

  if (doc.contains("ngram")) {
    const auto& g = doc["ngram"];
    check_keys(g, "ngram", {"corpus", "smoothing", "k", "discount", "normalize"});
    c.ngram_corpus = resolve(config_dir, require_string(g, "corpus", "ngram"));
    auto& s = c.ngram_smoothing;
    s.kind = parse_smoothing(get<std::string>(g, "smoothing", "ngram", "kneser_ney"));
    s.k = get<double>(g, "k", "ngram", s.k);
    s.discount = get<double>(g, "discount", "ngram", s.discount);
    s.normalize = get<bool>(g, "normalize", "ngram", s.normalize);
  }

  c.reference_model = get<std::string>(doc, "reference_model", "config", "");
  if (!c.reference_model.empty()) c.model(c.reference_model);
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
  return parse_run_config(read_file(file), file.parent_path());
}

void validate_paths(const RunConfig& c) {
  auto need = [](const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
  };
  for (const auto& m : c.models) {
    need(m.bundle / "manifest.json", "model bundle for " + m.id);
    if (m.translators != "trained" && m.translators != "identity")
      need(fs::path(m.translators) / "manifest.json", "translators for " + m.id);
  }
  for (const auto& d : c.datasets) need(d.path, "dataset " + d.id);
  if (c.frequency) need(*c.frequency, "frequency table");
  if (c.lens_corpus) need(*c.lens_corpus, "lens training corpus");
  if (c.ngram_corpus) need(*c.ngram_corpus, "bigram corpus");
}

}  // namespace lenspsych
