#include "lenspsych/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <tuple>

#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"

namespace lenspsych {

std::string_view to_string(Measure m) {
  switch (m) {
    case Measure::SPR: return "SPR";
    case Measure::FPGD: return "FPGD";
    case Measure::MAZE: return "MAZE";
    case Measure::N400: return "N400";
  }
  return "?";
}

Measure parse_measure(std::string_view name) {
  if (name == "SPR") return Measure::SPR;
  if (name == "FPGD") return Measure::FPGD;
  if (name == "MAZE") return Measure::MAZE;
  if (name == "N400") return Measure::N400;
  throw DataError("unknown measure: " + std::string(name));
}

std::string_view to_string(ClauseFinalMode mode) {
  switch (mode) {
    case ClauseFinalMode::off: return "off";
    case ClauseFinalMode::column: return "column";
    case ClauseFinalMode::punctuation: return "punct";
  }
  return "?";
}

ClauseFinalMode parse_clause_final_mode(std::string_view name) {
  if (name == "off") return ClauseFinalMode::off;
  if (name == "column") return ClauseFinalMode::column;
  if (name == "punct" || name == "punctuation") return ClauseFinalMode::punctuation;
  throw ConfigError("unknown clause-final mode: " + std::string(name));
}

bool natural_less(std::string_view a, std::string_view b) {
  std::size_t i = 0, j = 0;
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  while (i < a.size() && j < b.size()) {
    if (digit(a[i]) && digit(b[j])) {
      std::size_t ie = i, je = j;
      while (ie < a.size() && digit(a[ie])) ++ie;
      while (je < b.size() && digit(b[je])) ++je;
      auto na = a.substr(i, ie - i), nb = b.substr(j, je - j);
      while (na.size() > 1 && na[0] == '0') na.remove_prefix(1);
      while (nb.size() > 1 && nb[0] == '0') nb.remove_prefix(1);
      if (na.size() != nb.size()) return na.size() < nb.size();
      if (na != nb) return na < nb;
      i = ie;
      j = je;
    } else {
      if (a[i] != b[j]) return a[i] < b[j];
      ++i;
      ++j;
    }
  }
  if ((a.size() - i) != (b.size() - j)) return (a.size() - i) < (b.size() - j);
  return a < b;
}

namespace {

double parse_number(std::string_view text, std::size_t line, const char* column) {
  const auto t = trim(text);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size())
    throw DataError("line " + std::to_string(line) + ": non-numeric " + column + " '" +
                    std::string(text) + "'");
  if (!std::isfinite(v))
    throw DataError("line " + std::to_string(line) + ": non-finite " + column);
  return v;
}

int parse_int(std::string_view text, std::size_t line, const char* column) {
  const auto t = trim(text);
  int v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size())
    throw DataError("line " + std::to_string(line) + ": non-integer " + column + " '" +
                    std::string(text) + "'");
  return v;
}

std::optional<bool> parse_flag(std::string_view text, std::size_t line) {
  const auto t = trim(text);
  if (t.empty()) return std::nullopt;
  if (t == "1" || t == "true" || t == "True" || t == "TRUE" || t == "yes") return true;
  if (t == "0" || t == "false" || t == "False" || t == "FALSE" || t == "no") return false;
  throw DataError("line " + std::to_string(line) + ": unrecognised clause_final value '" +
                  std::string(t) + "'");
}

double order_free_mean(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

struct Group {
  WordRecord record;
  std::vector<double> costs;
  std::vector<double> baselines;
};

}  // namespace

std::vector<WordRecord> read_reading_tsv(std::istream& in, const DatasetDeclaration& decl,
                                         LoadReport* report) {
  LoadReport local;
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> col;
  bool have_header = false;

  using Key = std::tuple<std::string, int, Measure>;
  std::map<Key, Group> groups;

  auto field = [&](const std::vector<std::string>& f, const char* name) -> std::optional<std::string_view> {
    auto it = col.find(name);
    if (it == col.end() || it->second >= f.size()) return std::nullopt;
    return std::string_view(f[it->second]);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    auto fields = split_tabs(line);
    if (!have_header) {
      for (std::size_t i = 0; i < fields.size(); ++i) col[std::string(trim(fields[i]))] = i;
      for (const char* required : {"seq_id", "word_index", "word", "measure", "cost"})
        if (!col.contains(required))
          throw DataError(std::string("missing required column: ") + required);
      have_header = true;
      continue;
    }
    ++local.rows_read;
    if (fields.size() < col.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(col.size()) +
                      " fields, got " + std::to_string(fields.size()));

    const Measure measure = parse_measure(trim(*field(fields, "measure")));
    if (decl.measure && *decl.measure != measure) {
      ++local.rows_skipped_measure;
      continue;
    }
    const std::string seq(trim(*field(fields, "seq_id")));
    const std::string word(trim(*field(fields, "word")));
    if (seq.empty()) throw DataError("line " + std::to_string(line_no) + ": empty seq_id");
    if (word.empty()) throw DataError("line " + std::to_string(line_no) + ": empty word");
    const int index = parse_int(*field(fields, "word_index"), line_no, "word_index");
    const double cost = parse_number(*field(fields, "cost"), line_no, "cost");

    auto [it, inserted] = groups.try_emplace(Key{seq, index, measure});
    Group& g = it->second;
    if (inserted) {
      g.record.dataset_id = decl.dataset_id;
      g.record.stimuli_id = decl.stimuli_id.empty() ? decl.dataset_id : decl.stimuli_id;
      g.record.seq_id = seq;
      g.record.word_index = index;
      g.record.word = word;
      g.record.measure = measure;
    } else if (g.record.word != word) {
      throw DataError("line " + std::to_string(line_no) + ": word '" + word + "' disagrees with '" +
                      g.record.word + "' for " + seq + ":" + std::to_string(index));
    }
    g.costs.push_back(cost);
    if (auto b = field(fields, "baseline_amplitude"); b && !trim(*b).empty())
      g.baselines.push_back(parse_number(*b, line_no, "baseline_amplitude"));
    if (auto c = field(fields, "clause_final"); c && !g.record.clause_final)
      g.record.clause_final = parse_flag(*c, line_no);
    if (auto t = field(fields, "token_override"); t && !trim(*t).empty() && !g.record.token_override) {
      std::string override_text(trim(*t));
      if (override_text.find_first_of(" \t") != std::string::npos)
        throw DataError("line " + std::to_string(line_no) + ": token_override must not contain whitespace");
      g.record.token_override = std::move(override_text);
    }
    if (auto p = field(fields, "pos"); p && !trim(*p).empty() && !g.record.pos)
      g.record.pos = std::string(trim(*p));
  }
  if (!have_header) throw DataError("reading TSV has no header row");

  std::vector<WordRecord> out;
  out.reserve(groups.size());
  for (auto& [key, g] : groups) {
    g.record.cost = order_free_mean(g.costs);
    g.record.subject_count = static_cast<int>(g.costs.size());
    if (!g.baselines.empty()) g.record.baseline_amplitude = order_free_mean(g.baselines);
    out.push_back(std::move(g.record));
  }
  std::stable_sort(out.begin(), out.end(), [](const WordRecord& a, const WordRecord& b) {
    if (a.seq_id != b.seq_id) return natural_less(a.seq_id, b.seq_id);
    if (a.word_index != b.word_index) return a.word_index < b.word_index;
    return a.measure < b.measure;
  });
  local.records = out.size();
  if (report) *report = local;
  return out;
}

std::vector<WordRecord> load_reading_tsv(const std::filesystem::path& path,
                                         const DatasetDeclaration& decl, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open reading TSV: " + path.string());
  return read_reading_tsv(in, decl, report);
}

void write_reading_tsv(std::ostream& out, std::span<const WordRecord> records) {
  out << "seq_id\tword_index\tword\tmeasure\tcost\tbaseline_amplitude\tclause_final\ttoken_override\tpos\n";
  for (const auto& r : records) {
    out << r.seq_id << '\t' << r.word_index << '\t' << r.word << '\t' << to_string(r.measure) << '\t'
        << format_double(r.cost) << '\t'
        << (r.baseline_amplitude ? format_double(*r.baseline_amplitude) : "") << '\t'
        << (r.clause_final ? (*r.clause_final ? "1" : "0") : "") << '\t'
        << r.token_override.value_or("") << '\t' << r.pos.value_or("") << '\n';
  }
}

std::vector<WordRecord> preprocess(std::vector<WordRecord> records, bool require_baseline,
                                   LoadReport* report) {
  if (!records.empty()) {
    const Measure m = records.front().measure;
    for (const auto& r : records)
      if (r.measure != m) throw DataError("preprocess expects records of a single measure");
  }
  std::vector<WordRecord> out;
  out.reserve(records.size());
  std::size_t dropped = 0;
  for (auto& r : records) {
    if (is_behavioral(r.measure) && r.cost == 0.0) {
      ++dropped;
      continue;
    }
    if (require_baseline && r.measure == Measure::N400 && !r.baseline_amplitude)
      throw DataError("N400 record " + r.seq_id + ":" + std::to_string(r.word_index) +
                      " lacks baseline_amplitude");
    out.push_back(std::move(r));
  }
  if (report) report->dropped_zero_cost += dropped;
  return out;
}

// ---------------------------------------------------------------------------

std::string FrequencyTable::normalize(std::string_view word) {
  auto is_punct = [](unsigned char c) { return c < 0x80 && std::ispunct(c); };
  std::size_t b = 0, e = word.size();
  while (b < e && is_punct(static_cast<unsigned char>(word[b]))) ++b;
  while (e > b && is_punct(static_cast<unsigned char>(word[e - 1]))) --e;
  if (b == e) {  // all punctuation: keep as-is
    b = 0;
    e = word.size();
  }
  std::string out(word.substr(b, e - b));
  for (auto& c : out)
    if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void FrequencyTable::set(std::string_view word, double per_million) {
  if (!(per_million >= 0.0) || !std::isfinite(per_million))
    throw DataError("frequency for '" + std::string(word) + "' must be a finite non-negative number");
  table_[normalize(word)] = per_million;
}

double FrequencyTable::per_million(std::string_view word) const {
  auto it = table_.find(normalize(word));
  return it == table_.end() ? 0.0 : it->second;
}

double FrequencyTable::log_frequency(std::string_view word) const {
  return std::log(per_million(word) + floor_);
}

FrequencyTable read_frequency_tsv(std::istream& in, double floor_per_million) {
  if (!(floor_per_million > 0.0)) throw ConfigError("frequency floor must be positive");
  FrequencyTable table(floor_per_million);
  std::string line;
  std::size_t line_no = 0;
  bool header_checked = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    auto f = split_tabs(line);
    if (f.size() < 2) throw DataError("frequency table line " + std::to_string(line_no) + ": expected word and per_million");
    if (!header_checked) {
      header_checked = true;
      if (trim(f[0]) == "word" && trim(f[1]) == "per_million") continue;
    }
    table.set(trim(f[0]), parse_number(f[1], line_no, "per_million"));
  }
  return table;
}

FrequencyTable load_frequency_tsv(const std::filesystem::path& path, double floor_per_million) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open frequency table: " + path.string());
  return read_frequency_tsv(in, floor_per_million);
}

std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

void attach_covariates(std::vector<WordRecord>& records, const FrequencyTable& freq) {
  std::map<std::pair<std::string_view, int>, const WordRecord*> by_position;
  for (const auto& r : records) by_position[{r.seq_id, r.word_index}] = &r;

  std::vector<Covariates> computed(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    Covariates c;
    c.attached = true;
    c.complete = true;
    for (int k = 0; k < 3; ++k) {
      const WordRecord* w = &r;
      if (k > 0) {
        auto it = by_position.find({r.seq_id, r.word_index - k});
        w = it == by_position.end() ? nullptr : it->second;
      }
      if (!w) {
        c.complete = false;
        continue;
      }
      c.length[k] = static_cast<double>(utf8_length(w->word));
      c.log_freq[k] = freq.log_frequency(w->word);
    }
    computed[i] = c;
  }
  for (std::size_t i = 0; i < records.size(); ++i) records[i].covariates = computed[i];
}

void mark_clause_final(std::vector<WordRecord>& records, ClauseFinalMode mode) {
  if (mode == ClauseFinalMode::off) return;
  if (mode == ClauseFinalMode::column) {
    for (const auto& r : records)
      if (!r.clause_final)
        throw DataError("clause_final column missing for " + r.seq_id + ":" +
                        std::to_string(r.word_index));
    return;
  }
  std::map<std::string_view, int> last_index;
  for (const auto& r : records) {
    auto [it, inserted] = last_index.try_emplace(r.seq_id, r.word_index);
    if (!inserted) it->second = std::max(it->second, r.word_index);
  }
  for (auto& r : records) {
    std::string_view w = r.word;
    while (!w.empty() && std::string_view("\"')]}").find(w.back()) != std::string_view::npos)
      w.remove_suffix(1);
    for (std::string_view closer : {"”", "’", "»"})
      while (w.ends_with(closer)) w.remove_suffix(closer.size());
    const bool punct = !w.empty() && std::string_view(".,;:!?").find(w.back()) != std::string_view::npos;
    r.clause_final = punct || r.word_index == last_index[r.seq_id];
  }
}

double flag_agreement(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw DataError("flag vectors differ in length");
  if (a.empty()) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace lenspsych
