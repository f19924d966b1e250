#include "lenspsych/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"
#include "lenspsych/meta_analysis.hpp"
#include "lenspsych/svg.hpp"
#include "lenspsych/synthetic.hpp"

namespace lenspsych {

namespace fs = std::filesystem;
using json = nlohmann::json;

int resolve_workers(std::optional<int> cli, int config_value) {
  if (cli) {
    if (*cli < 1) throw ConfigError("--workers must be >= 1");
    return *cli;
  }
  if (const char* env = std::getenv(kWorkersEnv); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 1024)
      throw ConfigError(std::string(kWorkersEnv) + " must be a positive integer, got '" + env + "'");
    return static_cast<int>(v);
  }
  return std::max(1, config_value);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t width = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (width == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < width; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

std::mutex log_mutex;

void say(std::ostream& log, const std::string& msg) {
  std::lock_guard lock(log_mutex);
  log << msg << '\n' << std::flush;
}

}  // namespace

std::vector<Sequence> sequences_from_records(std::span<const WordRecord> records) {
  std::map<std::string, std::map<int, const WordRecord*>> by_seq;
  for (const auto& r : records) {
    auto [it, inserted] = by_seq[r.seq_id].try_emplace(r.word_index, &r);
    if (!inserted && it->second->word != r.word)
      throw DataError("sequence " + r.seq_id + " word " + std::to_string(r.word_index) +
                      " has conflicting text across measures");
  }
  std::vector<std::string> order;
  for (const auto& [id, words] : by_seq) order.push_back(id);
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return natural_less(a, b); });

  std::vector<Sequence> out;
  for (const auto& id : order) {
    const auto& words = by_seq[id];
    Sequence s;
    s.seq_id = id;
    s.first_index = words.begin()->first;
    int expect = s.first_index;
    for (const auto& [idx, rec] : words) {
      if (idx != expect)
        throw DataError("sequence " + id + " has a gap at word_index " + std::to_string(expect));
      ++expect;
      s.words.push_back(rec->word);
      s.model_words.push_back(rec->model_text());
    }
    out.push_back(std::move(s));
  }
  return out;
}

SurprisalTable score_sequence(const ModelBundle& model, const Tokenizer& tokenizer, const Sequence& seq,
                              std::span<const LensKind> lenses, const TranslatorSet* translators,
                              WindowOptions window) {
  const auto bos = tokenizer.bos_id();
  if (!bos) throw ConfigError("tokenizer has no BOS token; word 0 could not be scored");
  std::string text;
  for (const auto& w : seq.model_words) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  const auto enc = tokenizer.encode(text);
  const auto alignment = align_words(seq.model_words, enc.offsets, text);
  std::vector<TokenId> ids;
  ids.reserve(enc.ids.size() + 1);
  ids.push_back(*bos);
  ids.insert(ids.end(), enc.ids.begin(), enc.ids.end());
  for (auto id : ids)
    if (id < 0 || id >= model.config.vocab_size)
      throw DataError("token id " + std::to_string(id) + " outside the model vocabulary (sequence " +
                      seq.seq_id + ")");

  SurprisalTable table;
  table.seq_id = seq.seq_id;
  table.first_word_index = seq.first_index;
  table.n_layers = model.config.n_layers;
  for (auto lens : lenses) {
    auto part = token_surprisals(model, lens, lens == LensKind::tuned ? translators : nullptr, ids, window);
    table.tokens[lens] = std::move(part.tokens[lens]);
  }
  word_surprisals(table, alignment, 0);
  return table;
}

WordSurprisals read_word_surprisals(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open surprisal file: " + path.string());
  WordSurprisals out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (++n == 1) {
      if (line != kSurprisalTsvHeader) throw DataError("unexpected header in " + path.string());
      continue;
    }
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 6) throw DataError(path.string() + " line " + std::to_string(n) + ": expected 6 fields");
    if (f[3] != "word") continue;
    try {
      out[{f[0], std::stoi(f[4])}] = std::stod(f[5]);
    } catch (const std::exception&) {
      throw DataError(path.string() + " line " + std::to_string(n) + ": bad number");
    }
  }
  return out;
}

std::uint64_t hash_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string().front() != '.') files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += f.filename().string() + ':' + hex64(hash_file(f)) + ';';
  return fnv1a64(acc);
}

// ---------------------------------------------------------------------------

namespace {

struct LoadedModel {
  const ModelEntry* entry = nullptr;
  ModelBundle bundle;
  Tokenizer tokenizer;
  std::uint64_t hash = 0;
};

struct LoadedDataset {
  const DatasetEntry* entry = nullptr;
  std::vector<WordRecord> records;  // averaged, unfiltered
  Measure measure = Measure::SPR;
  std::uint64_t hash = 0;
  std::vector<Sequence> sequences;
};

LoadedModel load_model(const ModelEntry& entry) {
  LoadedModel m;
  m.entry = &entry;
  if (!fs::exists(entry.bundle / "manifest.json"))
    throw ConfigError("model bundle for " + entry.id + " not found: " + entry.bundle.string());
  m.bundle = load_bundle(entry.bundle);
  m.tokenizer = load_tokenizer(entry.bundle);
  m.hash = hash_directory(entry.bundle);
  return m;
}

std::vector<LoadedModel> load_models(const RunConfig& config, int workers) {
  std::vector<LoadedModel> out(config.models.size());
  parallel_for(out.size(), workers, [&](std::size_t i) { out[i] = load_model(config.models[i]); });
  return out;
}

LoadedDataset load_dataset(const DatasetEntry& entry) {
  LoadedDataset d;
  d.entry = &entry;
  if (!fs::exists(entry.path)) throw ConfigError("dataset " + entry.id + " not found: " + entry.path.string());
  d.records = load_reading_tsv(entry.path, {entry.id, entry.stimuli, entry.measure});
  if (d.records.empty()) throw DataError("dataset " + entry.id + " has no records");
  d.measure = d.records.front().measure;
  for (const auto& r : d.records)
    if (r.measure != d.measure)
      throw DataError("dataset " + entry.id + " mixes measures; declare `measure` in the config");
  d.hash = hash_file(entry.path);
  d.sequences = sequences_from_records(d.records);
  return d;
}

std::vector<LoadedDataset> load_datasets(const RunConfig& config) {
  if (config.datasets.empty()) throw ConfigError("config lists no datasets");
  std::vector<LoadedDataset> out;
  for (const auto& d : config.datasets) out.push_back(load_dataset(d));
  return out;
}

bool unit_current(const fs::path& dir, const std::string& key, const std::vector<fs::path>& files) {
  const auto marker = dir / "unit.json";
  if (!fs::exists(marker)) return false;
  try {
    if (json::parse(read_file(marker)).value("key", "") != key) return false;
  } catch (const json::exception&) {
    return false;
  }
  return std::all_of(files.begin(), files.end(), [&](const fs::path& f) { return fs::exists(dir / f); });
}

void mark_unit(const fs::path& dir, const std::string& key, json inputs) {
  json unit = {{"key", key}, {"inputs", std::move(inputs)}};
  write_file_atomic(dir / "unit.json", unit.dump(2) + "\n");
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) out.push_back(line);
  }
  return out;
}

std::string options_key(const TrainingOptions& o) {
  std::ostringstream s;
  s << "lr=" << format_double(o.learning_rate) << ";steps=" << o.steps << ";batch=" << o.batch_size
    << ";cosine=" << o.cosine_decay << ";val=" << format_double(o.validation_fraction)
    << ";eval=" << o.eval_every << ";dir=" << to_string(o.direction) << ";seed=" << o.seed;
  return s.str();
}

fs::path translator_dir(const RunConfig& config, const ModelEntry& m) {
  if (m.translators == "trained") return config.out_dir / "translators" / m.id;
  return m.translators;
}

// Trains (or reuses) translators for one model.
void fit_lens_unit(const RunConfig& config, const LoadedModel& m, std::ostream& log) {
  if (!config.lens_corpus) throw ConfigError("fit-lens needs lens_training.corpus in the config");
  if (!fs::exists(*config.lens_corpus))
    throw ConfigError("lens training corpus not found: " + config.lens_corpus->string());
  auto options = config.lens_training;
  options.seed = config.seed;
  const auto dir = translator_dir(config, *m.entry);
  const std::string key = hex64(fnv1a64("fit-lens;" + hex64(m.hash) + ";" + hex64(hash_file(*config.lens_corpus)) +
                                        ";" + options_key(options)));
  if (unit_current(dir, key, {"manifest.json", "kl_curve.tsv"})) {
    say(log, "fit-lens " + m.entry->id + ": up to date");
    return;
  }
  say(log, "fit-lens " + m.entry->id + ": training " + std::to_string(m.bundle.config.n_layers - 1) +
               " translators");
  const auto bos = m.tokenizer.bos_id();
  std::vector<std::vector<TokenId>> corpus;
  for (const auto& line : read_lines(*config.lens_corpus)) {
    std::vector<TokenId> ids;
    if (bos) ids.push_back(*bos);
    const auto enc = m.tokenizer.encode(line);
    ids.insert(ids.end(), enc.ids.begin(), enc.ids.end());
    corpus.push_back(std::move(ids));
  }
  const auto result = train_translators(m.bundle, corpus, options);
  fs::create_directories(dir);
  save_translators(result.translators, dir);
  std::ostringstream curve;
  curve << "layer\tstep\ttrain_kl\tvalidation_kl\n";
  for (const auto& p : result.curve)
    curve << p.layer << '\t' << p.step << '\t' << format_double(p.train_kl) << '\t'
          << format_double(p.validation_kl) << '\n';
  write_file_atomic(dir / "kl_curve.tsv", curve.str());
  mark_unit(dir, key,
            {{"command", "fit-lens"},
             {"model", m.entry->id},
             {"options", options_key(options)},
             {"initial_validation_kl", result.initial_validation_kl},
             {"final_validation_kl", result.final_validation_kl}});
}

struct TranslatorSource {
  TranslatorSet set;
  std::string hash;
};

// Resolves translators for a model, training them first when needed and possible.
TranslatorSource resolve_translators(const RunConfig& config, const LoadedModel& m, std::ostream& log) {
  TranslatorSource out;
  if (m.entry->translators == "identity") {
    out.set = TranslatorSet::identity(m.bundle.config.n_layers, m.bundle.config.d_model);
    out.hash = "identity";
    return out;
  }
  const auto dir = translator_dir(config, *m.entry);
  if (m.entry->translators == "trained") {
    if (!config.lens_corpus && !fs::exists(dir / "manifest.json"))
      throw ConfigError("tuned lens for model " + m.entry->id +
                        " needs translators: run `lenspsych fit-lens` (set lens_training.corpus) or set "
                        "translators to \"identity\" or a translator directory");
    if (config.lens_corpus) fit_lens_unit(config, m, log);
  } else if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError("translators for " + m.entry->id + " not found: " + dir.string());
  }
  out.set = load_translators(dir, m.bundle.config);
  out.hash = hex64(hash_directory(dir));
  return out;
}

std::string window_key(const WindowOptions& w) {
  return "window=" + std::to_string(w.window) + ";stride=" + std::to_string(w.stride);
}

fs::path surprisal_dir(const RunConfig& config, const std::string& model, const std::string& dataset,
                       LensKind lens) {
  return config.out_dir / "surprisal" / model / dataset / std::string(to_string(lens));
}

std::string layer_file(int layer) { return "layer_" + std::to_string(layer) + ".tsv"; }

// Computes (or reuses) one surprisal unit; returns its content key.
std::string surprisal_unit(const RunConfig& config, const LoadedModel& m, const LoadedDataset& d,
                           LensKind lens, const TranslatorSource* tr, std::ostream& log) {
  const int L = m.bundle.config.n_layers;
  const auto dir = surprisal_dir(config, m.entry->id, d.entry->id, lens);
  const std::string key = hex64(fnv1a64("surprisal;" + hex64(m.hash) + ";" + hex64(d.hash) + ";" +
                                        std::string(to_string(lens)) + ";" + window_key(config.window) +
                                        ";" + (tr ? tr->hash : std::string("-"))));
  std::vector<fs::path> files;
  for (int l = 1; l <= L; ++l) files.emplace_back(layer_file(l));
  if (unit_current(dir, key, files)) return key;

  say(log, "surprisal " + m.entry->id + " / " + d.entry->id + " / " + std::string(to_string(lens)));
  const LensKind kinds[] = {lens};
  std::vector<std::ostringstream> layers(static_cast<std::size_t>(L));
  for (auto& s : layers) s << kSurprisalTsvHeader << '\n';
  for (const auto& seq : d.sequences) {
    const auto table = score_sequence(m.bundle, m.tokenizer, seq, kinds, tr ? &tr->set : nullptr, config.window);
    for (int l = 1; l <= L; ++l) write_surprisal_tsv(layers[l - 1], table, l, lens, false);
  }
  fs::create_directories(dir);
  for (int l = 1; l <= L; ++l) write_file_atomic(dir / layer_file(l), layers[l - 1].str());
  mark_unit(dir, key,
            {{"command", "surprisal"},
             {"model", m.entry->id},
             {"dataset", d.entry->id},
             {"lens", std::string(to_string(lens))},
             {"window", window_key(config.window)},
             {"translators", tr ? tr->hash : "-"}});
  return key;
}

struct SurprisalPlan {
  std::vector<LoadedModel> models;
  std::vector<LoadedDataset> datasets;
  std::vector<std::optional<TranslatorSource>> translators;  // per model
};

SurprisalPlan prepare(const RunConfig& config, int workers, std::ostream& log, bool need_tuned) {
  validate_paths(config);
  SurprisalPlan plan;
  plan.models = load_models(config, workers);
  plan.datasets = load_datasets(config);
  plan.translators.resize(plan.models.size());
  if (need_tuned)
    parallel_for(plan.models.size(), workers, [&](std::size_t i) {
      plan.translators[i] = resolve_translators(config, plan.models[i], log);
    });
  return plan;
}

bool wants_tuned(const RunConfig& config) {
  const auto lenses = config.lenses();
  return std::find(lenses.begin(), lenses.end(), LensKind::tuned) != lenses.end();
}

struct Unit {
  std::size_t model, dataset;
  LensKind lens;
};

std::vector<Unit> units_for(const RunConfig& config, const SurprisalPlan& plan) {
  std::vector<Unit> units;
  for (std::size_t d = 0; d < plan.datasets.size(); ++d)
    for (std::size_t m = 0; m < plan.models.size(); ++m)
      for (auto lens : config.lenses()) units.push_back({m, d, lens});
  return units;
}

const TranslatorSource* translators_for(const SurprisalPlan& plan, const Unit& u) {
  return u.lens == LensKind::tuned ? &*plan.translators[u.model] : nullptr;
}

}  // namespace

void cmd_fit_lens(const RunConfig& config, std::ostream& log) {
  validate_paths(config);
  if (!config.lens_corpus) throw ConfigError("fit-lens needs lens_training.corpus in the config");
  auto models = load_models(config, config.workers);
  parallel_for(models.size(), config.workers, [&](std::size_t i) {
    if (models[i].entry->translators != "trained") {
      say(log, "fit-lens " + models[i].entry->id + ": translators come from " + models[i].entry->translators);
      return;
    }
    fit_lens_unit(config, models[i], log);
  });
}

void cmd_surprisal(const RunConfig& config, std::ostream& log) {
  const auto plan = prepare(config, config.workers, log, wants_tuned(config));
  const auto units = units_for(config, plan);
  parallel_for(units.size(), config.workers, [&](std::size_t i) {
    const auto& u = units[i];
    surprisal_unit(config, plan.models[u.model], plan.datasets[u.dataset], u.lens, translators_for(plan, u), log);
  });
}

// ---------------------------------------------------------------------------

namespace {

fs::path evaluate_dir(const RunConfig& config, const std::string& dataset, const std::string& model,
                      LensKind lens) {
  return config.out_dir / "evaluate" / dataset / model / std::string(to_string(lens));
}

json fit_json(const OlsFit& fit) {
  json betas = json::object();
  for (std::size_t j = 0; j < fit.columns.size(); ++j)
    if (fit.kept[j]) betas[fit.columns[j]] = fit.beta[j];
  json out = {{"n", fit.n},        {"rank", fit.rank},       {"rss", fit.rss},
              {"loglik", std::isfinite(fit.loglik) ? json(fit.loglik) : json("inf")},
              {"dropped", fit.dropped}, {"beta", betas}};
  return out;
}

struct PreparedRecords {
  std::vector<WordRecord> rows;  // filtered, covariates attached
  LoadReport report;
};

PreparedRecords prepare_records(const RunConfig& config, const LoadedDataset& d, const FrequencyTable& freq) {
  PreparedRecords p;
  auto records = d.records;
  mark_clause_final(records, config.clause_final);
  attach_covariates(records, freq);
  p.report.records = records.size();
  p.rows = preprocess(std::move(records), d.measure == Measure::N400, &p.report);
  return p;
}

}  // namespace

void cmd_evaluate(const RunConfig& config, std::ostream& log) {
  const auto plan = prepare(config, config.workers, log, wants_tuned(config));
  FrequencyTable freq(config.frequency_floor);
  std::string freq_hash = "none";
  if (config.frequency) {
    freq = load_frequency_tsv(*config.frequency, config.frequency_floor);
    freq_hash = hex64(hash_file(*config.frequency));
  } else {
    say(log, "warning: no frequency table configured; every word gets the floor frequency");
  }
  std::vector<PreparedRecords> prepared;
  for (const auto& d : plan.datasets) prepared.push_back(prepare_records(config, d, freq));

  const auto units = units_for(config, plan);
  const bool clause = config.clause_final != ClauseFinalMode::off;
  parallel_for(units.size(), config.workers, [&](std::size_t i) {
    const auto& u = units[i];
    const auto& m = plan.models[u.model];
    const auto& d = plan.datasets[u.dataset];
    const auto& rows = prepared[u.dataset].rows;
    const int L = m.bundle.config.n_layers;
    const auto s_key = surprisal_unit(config, m, d, u.lens, translators_for(plan, u), log);
    const auto s_dir = surprisal_dir(config, m.entry->id, d.entry->id, u.lens);
    const auto dir = evaluate_dir(config, d.entry->id, m.entry->id, u.lens);
    const std::string key =
        hex64(fnv1a64("evaluate;" + s_key + ";" + hex64(d.hash) + ";" + freq_hash + ";" +
                      format_double(config.frequency_floor) + ";" + std::string(to_string(config.clause_final)) +
                      ";" + std::to_string(config.exclude_incomplete)));
    std::vector<fs::path> files = {"delta_ll.tsv", "fit_report.json"};
    if (clause) files.emplace_back("delta_ll_clause_final.tsv");
    for (int l = 1; l <= L; ++l) files.push_back(fs::path("residuals") / layer_file(l));
    if (unit_current(dir, key, files)) return;
    say(log, "evaluate " + d.entry->id + " / " + m.entry->id + " / " + std::string(to_string(u.lens)));

    DesignOptions opts;
    opts.exclude_incomplete = config.exclude_incomplete;
    opts.baseline_amplitude = d.measure == Measure::N400;
    std::vector<DeltaLLRecord> main, clause_records;
    json layers = json::array();
    fs::create_directories(dir / "residuals");
    for (int l = 1; l <= L; ++l) {
      const auto surprisal = read_word_surprisals(s_dir / layer_file(l));
      auto run = [&](const DesignOptions& o, std::vector<DeltaLLRecord>& sink, json& report) {
        const auto design = build_design(rows, surprisal, o);
        const auto base = ols_fit(design.base);
        const auto full = ols_fit(design.full);
        DeltaLLRecord r{d.entry->id, m.entry->id, u.lens, l, design.base.rows(), delta_ll(base, full)};
        if (!std::isfinite(r.delta_ll))
          say(log, "warning: exact fit for " + d.entry->id + "/" + m.entry->id + " layer " + std::to_string(l) +
                       "; delta LL reported as inf and excluded from aggregates");
        sink.push_back(r);
        report = {{"layer", l},
                  {"n_rows", r.n_rows},
                  {"delta_ll_total", std::isfinite(r.delta_ll) ? json(r.delta_ll) : json("inf")},
                  {"delta_ll_per_row", std::isfinite(r.delta_ll) ? json(r.delta_ll_per_row()) : json("inf")},
                  {"base", fit_json(base)},
                  {"full", fit_json(full)}};
        return std::make_pair(design.record_index, full.residuals);
      };
      json entry;
      const auto [index, residuals] = run(opts, main, entry);
      if (clause) {
        auto copt = opts;
        copt.clause_final_only = true;
        json centry;
        run(copt, clause_records, centry);
        entry["clause_final"] = centry;
      }
      layers.push_back(entry);
      std::ostringstream res;
      res << "seq_id\tword_index\tword\tlength\tfreq\tpos\tresidual\n";
      for (std::size_t k = 0; k < index.size(); ++k) {
        const auto& r = rows[index[k]];
        res << r.seq_id << '\t' << r.word_index << '\t' << r.word << '\t'
            << format_double(r.covariates.length[0]) << '\t' << format_double(r.covariates.log_freq[0]) << '\t'
            << r.pos.value_or("NA") << '\t' << format_double(residuals[k]) << '\n';
      }
      write_file_atomic(dir / "residuals" / layer_file(l), res.str());
    }
    std::ostringstream tsv;
    write_delta_ll_tsv(tsv, main);
    write_file_atomic(dir / "delta_ll.tsv", tsv.str());
    if (clause) {
      std::ostringstream ctsv;
      write_delta_ll_tsv(ctsv, clause_records);
      write_file_atomic(dir / "delta_ll_clause_final.tsv", ctsv.str());
    }
    json report = {{"dataset", d.entry->id},
                   {"model", m.entry->id},
                   {"lens", std::string(to_string(u.lens))},
                   {"measure", std::string(to_string(d.measure))},
                   {"frequency_transform", "log(per_million + " + format_double(config.frequency_floor) + ")"},
                   {"loglik", "Gaussian MLE, sigma^2 = RSS / n"},
                   {"incomplete_context_rows", config.exclude_incomplete ? "excluded" : "zero-filled"},
                   {"clause_final", std::string(to_string(config.clause_final))},
                   {"random_effects", "not modelled (fixed-effects OLS only)"},
                   {"layers", layers}};
    if (u.lens == LensKind::tuned) report["kl_direction"] = std::string(to_string(plan.translators[u.model]->set.direction));
    write_file_atomic(dir / "fit_report.json", report.dump(2) + "\n");
    mark_unit(dir, key,
              {{"command", "evaluate"},
               {"dataset", d.entry->id},
               {"model", m.entry->id},
               {"lens", std::string(to_string(u.lens))}});
  });

  // Merge per-unit tables in config order.
  std::ostringstream merged, merged_clause, datasets;
  merged << kDeltaLLTsvHeader << '\n';
  merged_clause << kDeltaLLTsvHeader << '\n';
  auto append = [](std::ostringstream& out, const fs::path& file) {
    const auto text = read_file(file);
    out << text.substr(text.find('\n') + 1);
  };
  for (const auto& u : units) {
    const auto dir = evaluate_dir(config, plan.datasets[u.dataset].entry->id, plan.models[u.model].entry->id, u.lens);
    append(merged, dir / "delta_ll.tsv");
    if (clause) append(merged_clause, dir / "delta_ll_clause_final.tsv");
  }
  datasets << "dataset\tstimuli\tmeasure\trecords\tdropped_zero_cost\tregression_records\n";
  for (std::size_t i = 0; i < plan.datasets.size(); ++i) {
    const auto& d = plan.datasets[i];
    const auto& p = prepared[i];
    datasets << d.entry->id << '\t' << d.entry->stimuli << '\t' << to_string(d.measure) << '\t'
             << p.report.records << '\t' << p.report.dropped_zero_cost << '\t' << p.rows.size() << '\n';
  }
  const auto out = config.out_dir / "evaluate";
  write_file_atomic(out / "delta_ll.tsv", merged.str());
  if (clause) write_file_atomic(out / "delta_ll_clause_final.tsv", merged_clause.str());
  write_file_atomic(out / "datasets.tsv", datasets.str());
}

// ---------------------------------------------------------------------------

namespace {

fs::path ensure_ngram(const RunConfig& config, std::ostream& log) {
  if (!config.ngram_corpus) throw ConfigError("contextualization needs an `ngram` section with a corpus");
  const auto dir = config.out_dir / "ngram";
  const auto& s = config.ngram_smoothing;
  const std::string key = hex64(fnv1a64("ngram;" + hex64(hash_file(*config.ngram_corpus)) + ";" +
                                        std::string(to_string(s.kind)) + ";" + format_double(s.k) + ";" +
                                        format_double(s.discount) + ";" + std::to_string(s.normalize)));
  if (unit_current(dir, key, {"unigrams.tsv", "bigrams.tsv", "smoothing.json"})) return dir;
  cmd_ngram_train(*config.ngram_corpus, dir, s, config.workers, log);
  mark_unit(dir, key, {{"command", "ngram-train"}});
  return dir;
}

std::string fixed(double v, int digits) { return std::isfinite(v) ? format_fixed(v, digits) : "NA"; }

}  // namespace

void cmd_ngram_train(const fs::path& corpus, const fs::path& out_dir, const SmoothingConfig& smoothing,
                     int workers, std::ostream& log) {
  if (!fs::exists(corpus)) throw ConfigError("bigram corpus not found: " + corpus.string());
  const auto lines = read_lines(corpus);
  const auto model = train_bigram(lines, smoothing, workers);
  save_bigram(model, out_dir);
  say(log, "ngram-train: " + std::to_string(model.vocab_size()) + " types, " +
               std::to_string(model.bigrams().size()) + " bigram types -> " + out_dir.string());
}

void cmd_correlate(const RunConfig& config, std::ostream& log) {
  if (config.reference_model.empty())
    throw ConfigError("correlate needs `reference_model` naming the well-contextualized comparator");
  const auto plan = prepare(config, config.workers, log, wants_tuned(config));
  const auto bigram = load_bigram(ensure_ngram(config, log));
  std::size_t ref_index = 0;
  while (plan.models[ref_index].entry->id != config.reference_model) ++ref_index;

  const auto units = units_for(config, plan);
  parallel_for(units.size(), config.workers, [&](std::size_t i) {
    const auto& u = units[i];
    surprisal_unit(config, plan.models[u.model], plan.datasets[u.dataset], u.lens, translators_for(plan, u), log);
  });
  for (std::size_t d = 0; d < plan.datasets.size(); ++d)
    surprisal_unit(config, plan.models[ref_index], plan.datasets[d], LensKind::logit, nullptr, log);

  std::ostringstream tsv, summary;
  tsv << "dataset\tmodel\tlens\tlayer\tdepth\tr_bigram\tr_reference\n";
  summary << "dataset\tmodel\tlens\tr_depth_bigram\tr_depth_reference\n";
  SvgChart chart{"Layer surprisal vs comparators", "relative layer depth", "Pearson r", {}, false};
  for (const auto& d : plan.datasets) {
    std::vector<std::pair<std::string, int>> keys;
    std::vector<double> bi;
    for (const auto& seq : d.sequences) {
      const auto s = bigram_surprisal(bigram, seq.words);
      for (std::size_t w = 0; w < seq.words.size(); ++w) {
        keys.emplace_back(seq.seq_id, seq.first_index + static_cast<int>(w));
        bi.push_back(s[w]);
      }
    }
    const auto& ref = plan.models[ref_index];
    const auto ref_words = read_word_surprisals(surprisal_dir(config, ref.entry->id, d.entry->id, LensKind::logit) /
                                                layer_file(ref.bundle.config.n_layers));
    auto column = [&](const WordSurprisals& table) {
      std::vector<double> out;
      for (const auto& k : keys) {
        auto it = table.find(k);
        if (it == table.end()) throw DataError("surprisal missing for " + k.first + ":" + std::to_string(k.second));
        out.push_back(it->second);
      }
      return out;
    };
    const auto reference = column(ref_words);
    for (const auto& u : units) {
      if (u.dataset != static_cast<std::size_t>(&d - plan.datasets.data())) continue;
      const auto& m = plan.models[u.model];
      const int L = m.bundle.config.n_layers;
      std::vector<std::vector<double>> layers;
      for (int l = 1; l <= L; ++l)
        layers.push_back(column(read_word_surprisals(surprisal_dir(config, m.entry->id, d.entry->id, u.lens) / layer_file(l))));
      const auto result = contextualization_correlation(layers, bi, reference);
      SvgSeries sb{d.entry->id + " " + m.entry->id + " " + std::string(to_string(u.lens)) + " bigram", {}, true, true};
      SvgSeries sr{d.entry->id + " " + m.entry->id + " " + std::string(to_string(u.lens)) + " reference", {}, true, true};
      for (const auto& row : result.layers) {
        tsv << d.entry->id << '\t' << m.entry->id << '\t' << to_string(u.lens) << '\t' << row.layer << '\t'
            << format_fixed(row.depth, 4) << '\t' << fixed(row.bigram.r, 4) << '\t' << fixed(row.reference.r, 4)
            << '\n';
        sb.points.emplace_back(row.depth, row.bigram.r);
        sr.points.emplace_back(row.depth, row.reference.r);
      }
      summary << d.entry->id << '\t' << m.entry->id << '\t' << to_string(u.lens) << '\t'
              << fixed(result.depth_vs_bigram.r, 4) << (result.depth_vs_bigram.degenerate ? " (degenerate)" : "")
              << '\t' << fixed(result.depth_vs_reference.r, 4)
              << (result.depth_vs_reference.degenerate ? " (degenerate)" : "") << '\n';
      chart.series.push_back(std::move(sb));
      chart.series.push_back(std::move(sr));
    }
  }
  tsv << "# bigram model: " << to_string(bigram.smoothing().kind) << ", trained on "
      << config.ngram_corpus->filename().string() << "; reference: last layer of " << config.reference_model << '\n';
  const auto out = config.out_dir / "report";
  fs::create_directories(out);
  write_file_atomic(out / "contextualization.tsv", tsv.str());
  write_file_atomic(out / "contextualization_summary.tsv", summary.str());
  write_file_atomic(out / "contextualization.svg", render_svg(chart));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<DeltaLLRecord> read_delta_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_delta_ll_tsv(in);
}

struct ResidualRow {
  std::string seq_id;
  int word_index = 0;
  std::string word;
  double length = 0.0, freq = 0.0;
  std::string pos;
  double residual = 0.0;
};

std::vector<ResidualRow> read_residuals(const fs::path& path) {
  std::vector<ResidualRow> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 7) throw DataError("malformed residual file " + path.string());
    out.push_back({f[0], std::stoi(f[1]), f[2], std::stod(f[3]), std::stod(f[4]), f[5], std::stod(f[6])});
  }
  return out;
}

}  // namespace

void cmd_report(const RunConfig& config, std::ostream& log) {
  cmd_evaluate(config, log);
  const auto records = read_delta_file(config.out_dir / "evaluate" / "delta_ll.tsv");
  ModelRegistry registry;
  for (const auto& m : config.models) registry[m.id] = {m.id, m.family, m.param_count, 0};
  const auto out = config.out_dir / "report";
  fs::create_directories(out);
  json summary = {{"depth", "layer / n_layers; bins [lo, hi), last bin closed at 1.0"},
                  {"corrected_delta_ll", "raw minus fitted stimuli/model/lens effects; intercept retained"},
                  {"frequency_transform", "log(per_million + " + format_double(config.frequency_floor) + ")"}};

  std::size_t non_finite = 0;
  for (const auto& r : records) non_finite += !std::isfinite(r.delta_ll);
  summary["non_finite_delta_ll_excluded"] = non_finite;

  {
    const auto rows = depth_binned_table(records, registry);
    std::ostringstream s;
    write_table1_tsv(s, rows);
    write_file_atomic(out / "table1.tsv", s.str());
  }
  {
    const auto rows = win_rate_table(records, registry);
    std::ostringstream s;
    write_table2_tsv(s, rows);
    write_file_atomic(out / "table2.tsv", s.str());
  }
  {
    std::ostringstream s;
    s << "dataset\tlens\tmode\tn_models\tpearson_r\tdegenerate\tslope_per_log10_params\n";
    SvgChart chart{"Delta LL vs parameter count", "parameters (log10)", "delta LL per row x1000", {}, true};
    std::vector<double> best_r;
    std::size_t skipped = 0;
    for (const auto& series : scaling_series(records, registry)) {
      if (series.points.size() < 3) {
        ++skipped;
        continue;
      }
      const auto e = scaling_effect(series.points);
      s << series.dataset_id << '\t' << to_string(series.lens) << '\t' << to_string(series.mode) << '\t' << e.n
        << '\t' << format_fixed(e.pearson_r, 4) << '\t' << (e.degenerate ? 1 : 0) << '\t'
        << format_fixed(e.slope * 1000.0, 4) << '\n';
      if (series.mode == ScalingMode::best_layer) best_r.push_back(e.pearson_r);
      SvgSeries line{series.dataset_id + " " + std::string(to_string(series.lens)) + " " +
                         std::string(to_string(series.mode)),
                     {}, true, true};
      for (const auto& p : series.points) line.points.emplace_back(std::log10(p.param_count), p.delta_ll * 1000.0);
      chart.series.push_back(std::move(line));
    }
    if (skipped) s << "# " << skipped << " series skipped: fewer than 3 models with param_count\n";
    s << "# slope in delta LL per row x1000 per decade of parameters\n";
    write_file_atomic(out / "scaling.tsv", s.str());
    write_file_atomic(out / "scaling.svg", render_svg(chart));
    if (best_r.size() >= 2) {
      try {
        const auto t = t_test_mean_positive(best_r);
        summary["scaling_t_test"] = {{"settings", t.n}, {"mean_r", t.mean}, {"t", t.t}, {"p_one_sided", t.p}};
      } catch (const DataError& e) {
        summary["scaling_t_test"] = std::string("skipped: ") + e.what();
      }
    } else {
      summary["scaling_t_test"] = "skipped: fewer than 2 settings";
    }
  }

  // Interaction regression over (dataset, model, lens, layer) settings.
  {
    std::map<std::string, std::pair<std::string, std::string>> dataset_info;  // stimuli, measure
    std::istringstream in(read_file(config.out_dir / "evaluate" / "datasets.tsv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      auto f = split_tabs(line);
      if (f.size() >= 3) dataset_info[f[0]] = {f[1], f[2]};
    }
    std::vector<SettingRow> settings;
    for (const auto& r : records) {
      const double v = r.delta_ll_per_row();
      if (!std::isfinite(v)) continue;
      const auto& info = dataset_info.at(r.dataset_id);
      settings.push_back({info.first, r.model_id, std::string(to_string(r.lens)), info.second,
                          relative_depth(r.layer, model_layers(registry, r.model_id, records)), v * 1000.0});
    }
    std::ostringstream coefs, curves;
    SvgChart chart{"Corrected delta LL by layer depth", "relative layer depth", "corrected delta LL x1000", {}, false};
    try {
      const auto fit = interaction_regression(settings);
      write_coefficients_tsv(coefs, fit.fit);
      coefs << "# reference levels:";
      for (const auto& [factor, level] : fit.reference_level) coefs << ' ' << factor << '=' << level;
      coefs << '\n';
      curves << "measure\ta\tb\tc\n";
      for (const auto& c : corrected_dll_curves(settings, fit)) {
        curves << c.measure << '\t' << format_fixed(c.a, 6) << '\t' << format_fixed(c.b, 6) << '\t'
               << format_fixed(c.c, 6) << '\n';
        SvgSeries pts{c.measure, c.points, false, true};
        SvgSeries poly{c.measure + " fit", {}, true, false};
        for (int k = 0; k <= 50; ++k) {
          const double x = k / 50.0;
          poly.points.emplace_back(x, c.a + c.b * x + c.c * x * x);
        }
        chart.series.push_back(std::move(pts));
        chart.series.push_back(std::move(poly));
      }
      curves << "# corrected delta LL keeps the intercept\n";
    } catch (const DataError& e) {
      coefs << "# skipped: " << e.what() << '\n';
      curves << "# skipped: " << e.what() << '\n';
    }
    write_file_atomic(out / "interaction_coefs.tsv", coefs.str());
    write_file_atomic(out / "corrected_curves.tsv", curves.str());
    write_file_atomic(out / "corrected_curves.svg", render_svg(chart));
  }

  // Residual-error regression: best internal layer vs last layer.
  {
    std::ostringstream s;
    std::vector<ErrorRow> rows;
    std::string problem;
    std::map<std::tuple<std::string, std::string, LensKind>, std::vector<DeltaLLRecord>> groups;
    for (const auto& r : records) groups[{r.dataset_id, r.model_id, r.lens}].push_back(r);
    for (const auto& [key, recs] : groups) {
      const auto& [dataset, model, lens] = key;
      const int L = model_layers(registry, model, records);
      const int best = best_layer(recs).first;
      const auto dir = evaluate_dir(config, dataset, model, lens) / "residuals";
      const auto last_rows = read_residuals(dir / layer_file(L));
      const auto best_rows = read_residuals(dir / layer_file(best));
      if (last_rows.size() != best_rows.size()) throw DataError("residual files disagree for " + model);
      for (std::size_t k = 0; k < last_rows.size(); ++k) {
        const auto& a = last_rows[k];
        if (a.pos == "NA") {
          problem = "dataset " + dataset + " has no pos column";
          break;
        }
        rows.push_back({model, a.length, a.freq, static_cast<double>(a.word_index), a.pos, word_has_punct(a.word),
                        word_has_num(a.word),
                        a.residual * a.residual - best_rows[k].residual * best_rows[k].residual});
      }
      if (!problem.empty()) break;
    }
    if (!problem.empty()) {
      s << "# skipped: " << problem << '\n';
    } else {
      try {
        write_coefficients_tsv(s, residual_error_regression(rows));
      } catch (const DataError& e) {
        s << "# skipped: " << e.what() << '\n';
      }
    }
    write_file_atomic(out / "error_regression.tsv", s.str());
  }

  if (!config.reference_model.empty() && config.ngram_corpus) {
    cmd_correlate(config, log);
    summary["contextualization"] = "report/contextualization.tsv";
  } else {
    summary["contextualization"] = "skipped: needs reference_model and ngram.corpus";
  }
  write_file_atomic(out / "report.json", summary.dump(2) + "\n");
  say(log, "report written to " + out.string());
}

// ---------------------------------------------------------------------------

namespace {

std::size_t parameter_count(const ModelBundle& m) {
  std::size_t n = m.token_embedding.values().size() + m.position_embedding.values().size() +
                  m.final_norm.gain.size() + m.final_norm.bias.size();
  if (!m.config.tied_unembedding) n += m.unembedding.values().size();
  for (const auto& b : m.blocks)
    n += b.ln_attn.gain.size() * 2 + b.attn_qkv.values().size() + b.attn_qkv_bias.size() +
         b.attn_out.values().size() + b.attn_out_bias.size() + b.ln_mlp.gain.size() * 2 +
         b.mlp_in.values().size() + b.mlp_in_bias.size() + b.mlp_out.values().size() + b.mlp_out_bias.size();
  return n;
}

void write_toy(const fs::path& dir, std::uint64_t seed, const ModelConfig& config) {
  const auto bundle = make_toy_bundle(seed, config);
  save_bundle(bundle, dir);
  save_tokenizer(Tokenizer::chars(0), dir);
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

}  // namespace

void cmd_make_toy(const fs::path& out_dir, const ToyOptions& options, std::ostream& log) {
  options.config.validate();
  if (options.config.vocab_size < 256) throw ConfigError("toy bundles use the byte tokenizer: vocab_size >= 256");
  if (!options.fixture) {
    write_toy(out_dir, options.seed, options.config);
    say(log, "toy bundle written to " + out_dir.string());
    return;
  }
  fs::create_directories(out_dir);
  struct Spec {
    std::string id;
    ModelConfig config;
  };
  ModelConfig small = options.config, large = options.config;
  small.n_layers = std::max(2, options.config.n_layers / 2);
  small.d_model = std::max(8, options.config.d_model / 2);
  small.n_heads = std::max(1, options.config.n_heads / 2);
  large.n_layers = options.config.n_layers + options.config.n_layers / 2;
  large.d_model = options.config.d_model + options.config.d_model / 2;
  large.n_heads = options.config.n_heads;
  if (large.d_model % large.n_heads) large.d_model += large.n_heads - large.d_model % large.n_heads;
  const std::vector<Spec> specs = {{"toy-s", small}, {"toy-m", options.config}, {"toy-l", large}};

  json models = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto dir = out_dir / "models" / specs[i].id;
    write_toy(dir, options.seed + i, specs[i].config);
    const auto bundle = load_bundle(dir);
    models.push_back({{"id", specs[i].id},
                      {"bundle", "models/" + specs[i].id},
                      {"family", "toy"},
                      {"param_count", parameter_count(bundle)},
                      {"translators", "trained"}});
  }

  const auto lens_corpus = synthetic_sentences(options.seed * 31 + 1, 150);
  const auto bigram_corpus = synthetic_sentences(options.seed * 31 + 2, 1000);
  write_file_atomic(out_dir / "lens_corpus.txt", join_lines(lens_corpus));
  write_file_atomic(out_dir / "bigram_corpus.txt", join_lines(bigram_corpus));
  {
    std::ostringstream s;
    s << "word\tper_million\n";
    std::map<std::string, double> counts;
    double total = 0.0;
    for (const auto& line : bigram_corpus)
      for (const auto& w : split_words(line)) {
        counts[FrequencyTable::normalize(w)] += 1.0;
        total += 1.0;
      }
    for (const auto& [w, c] : counts) s << w << '\t' << format_double(c / total * 1e6) << '\n';
    write_file_atomic(out_dir / "freq.tsv", s.str());
  }

  // Reading data planted on toy-m: SPR tracks an early layer, MAZE the last.
  const auto planted = load_bundle(out_dir / "models" / "toy-m");
  const auto tok = Tokenizer::chars(0);
  const auto sentences = synthetic_sentences(options.seed * 31 + 3, 80);
  auto planted_layer = [&](int layer) {
    std::vector<std::vector<double>> s;
    const LensKind kinds[] = {LensKind::logit};
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      Sequence seq;
      seq.seq_id = "s" + std::to_string(i + 1);
      seq.words = split_words(sentences[i]);
      seq.model_words = seq.words;
      const auto table = score_sequence(planted, tok, seq, kinds, nullptr);
      s.push_back(table.words.at(LensKind::logit)[layer - 1]);
    }
    return s;
  };
  const int L = planted.config.n_layers;
  struct Reading {
    const char* file;
    Measure measure;
    int layer;
  };
  const Reading readings[] = {{"reading_spr.tsv", Measure::SPR, std::max(1, L / 2)},
                              {"reading_maze.tsv", Measure::MAZE, L}};
  json datasets = json::array();
  for (std::size_t k = 0; k < std::size(readings); ++k) {
    const auto& r = readings[k];
    PlantedCostOptions opts;
    opts.measure = r.measure;
    opts.dataset_id = r.file;
    opts.target_r2 = 0.8;  // char-level surprisal is largely word length; keep the rest above the noise
    auto records = planted_reading_records(sentences, planted_layer(r.layer), opts, options.seed * 31 + 10 + k);
    mark_clause_final(records, ClauseFinalMode::punctuation);
    for (auto& rec : records) rec.pos = synthetic_pos(rec.word);
    std::ostringstream s;
    write_reading_tsv(s, records);
    write_file_atomic(out_dir / r.file, "# planted on toy-m layer " + std::to_string(r.layer) + "\n" + s.str());
    const std::string id = r.measure == Measure::SPR ? "synthetic-spr" : "synthetic-maze";
    datasets.push_back({{"id", id}, {"path", r.file}, {"measure", std::string(to_string(r.measure))},
                        {"stimuli", "synthetic"}});
  }

  json config = {{"seed", options.seed},
                 {"out_dir", "out"},
                 {"workers", 1},
                 {"lens", "both"},
                 {"clause_final", "column"},
                 {"models", models},
                 {"datasets", datasets},
                 {"frequency", "freq.tsv"},
                 {"lens_training", {{"corpus", "lens_corpus.txt"}, {"steps", 150}, {"batch", 32}, {"eval_every", 50}}},
                 {"ngram", {{"corpus", "bigram_corpus.txt"}, {"smoothing", "kneser_ney"}, {"discount", 0.75}}},
                 {"reference_model", "toy-l"}};
  write_file_atomic(out_dir / "config.json", config.dump(2) + "\n");
  say(log, "toy fixture written to " + out_dir.string());
}

std::string cmd_validate_bundle(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw DataError("no manifest.json in " + dir.string());
  const auto bundle = load_bundle(dir);
  std::ostringstream s;
  const auto& c = bundle.config;
  s << "ok: " << bundle.architecture << " L=" << c.n_layers << " d=" << c.d_model << " heads=" << c.n_heads
    << " vocab=" << c.vocab_size << " positions=" << c.max_positions << " params=" << parameter_count(bundle);
  if (fs::exists(dir / "tokenizer.json")) {
    const auto tok = load_tokenizer(dir);
    s << " tokenizer=" << (tok.kind() == TokenizerKind::chars ? "chars" : "bpe");
    if (tok.vocab_size() > static_cast<std::size_t>(c.vocab_size))
      throw DataError("tokenizer vocabulary (" + std::to_string(tok.vocab_size()) + ") exceeds model vocab_size");
  }
  return s.str();
}

}  // namespace lenspsych
