#include "lenspsych/psychofit.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <istream>
#include <set>

#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"
#include "lenspsych/stats.hpp"

namespace lenspsych {

void DesignMatrix::add_column(std::string name, std::vector<double> values) {
  if (values.size() != y_.size())
    throw DataError("column " + name + " has " + std::to_string(values.size()) + " rows, expected " +
                    std::to_string(y_.size()));
  if (has(name)) throw DataError("duplicate design column: " + name);
  names_.push_back(std::move(name));
  cols_.push_back(std::move(values));
}

bool DesignMatrix::has(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t DesignMatrix::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw DataError("no design column named " + std::string(name));
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t OlsFit::index_of(std::string_view name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw DataError("no coefficient named " + std::string(name));
  return static_cast<std::size_t>(it - columns.begin());
}

double gaussian_loglik(double rss, std::size_t n) {
  if (rss == 0.0) return std::numeric_limits<double>::infinity();
  const auto dn = static_cast<double>(n);
  return -0.5 * dn * (std::log(2.0 * std::numbers::pi * rss / dn) + 1.0);
}

OlsFit ols_fit(const DesignMatrix& design) {
  const std::size_t n = design.rows(), p = design.cols();
  if (p == 0) throw DataError("design has no columns");
  if (n <= p)
    throw DataError("OLS needs more rows than columns (n=" + std::to_string(n) +
                    ", p=" + std::to_string(p) + ")");
  for (std::size_t j = 0; j < p; ++j) {
    const auto& c = design.column(j);
    if (std::all_of(c.begin(), c.end(), [](double v) { return std::isnan(v); }))
      throw DataError("design column " + design.names()[j] + " is all NaN");
    for (double v : c)
      if (!std::isfinite(v)) throw DataError("non-finite value in design column " + design.names()[j]);
  }
  for (double v : design.y())
    if (!std::isfinite(v)) throw DataError("non-finite value in regression target");

  OlsFit fit;
  fit.columns = design.names();
  fit.n = n;
  fit.kept.assign(p, false);

  // Householder reflectors stored column by column over the kept columns.
  std::vector<std::vector<double>> a;  // working copy of kept columns, transformed
  std::vector<std::vector<double>> reflectors;
  std::vector<std::size_t> kept_index;
  std::vector<double> qty = design.y();

  auto apply = [&](const std::vector<double>& v, std::size_t k, std::vector<double>& x) {
    double dot = 0.0;
    for (std::size_t i = k; i < n; ++i) dot += v[i] * x[i];
    for (std::size_t i = k; i < n; ++i) x[i] -= 2.0 * dot * v[i];
  };

  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> col = design.column(j);
    double orig = 0.0;
    for (double v : col) orig += v * v;
    orig = std::sqrt(orig);
    const std::size_t k = reflectors.size();
    for (std::size_t r = 0; r < k; ++r) apply(reflectors[r], r, col);
    double rest = 0.0;
    for (std::size_t i = k; i < n; ++i) rest += col[i] * col[i];
    rest = std::sqrt(rest);
    if (orig == 0.0 || rest <= 1e-9 * orig || k >= n) {
      fit.dropped.push_back(design.names()[j]);
      continue;
    }
    const double alpha = col[k] > 0 ? -rest : rest;
    std::vector<double> v(n, 0.0);
    v[k] = col[k] - alpha;
    for (std::size_t i = k + 1; i < n; ++i) v[i] = col[i];
    double vnorm = 0.0;
    for (std::size_t i = k; i < n; ++i) vnorm += v[i] * v[i];
    vnorm = std::sqrt(vnorm);
    for (std::size_t i = k; i < n; ++i) v[i] /= vnorm;
    apply(v, k, col);
    col[k] = alpha;
    for (std::size_t i = k + 1; i < n; ++i) col[i] = 0.0;
    apply(v, k, qty);
    reflectors.push_back(std::move(v));
    a.push_back(std::move(col));
    kept_index.push_back(j);
    fit.kept[j] = true;
  }

  const std::size_t r = kept_index.size();
  fit.rank = r;
  // Back substitution: R b = (Q^T y)[0..r)
  std::vector<double> b(r, 0.0);
  for (std::size_t ii = r; ii-- > 0;) {
    double s = qty[ii];
    for (std::size_t jj = ii + 1; jj < r; ++jj) s -= a[jj][ii] * b[jj];
    b[ii] = s / a[ii][ii];
  }
  fit.beta.assign(p, 0.0);
  for (std::size_t jj = 0; jj < r; ++jj) fit.beta[kept_index[jj]] = b[jj];

  fit.fitted.assign(n, 0.0);
  for (std::size_t jj = 0; jj < r; ++jj) {
    const auto& c = design.column(kept_index[jj]);
    for (std::size_t i = 0; i < n; ++i) fit.fitted[i] += c[i] * b[jj];
  }
  fit.residuals.resize(n);
  double rss = 0.0, ysq = 0.0, ymean = 0.0;
  for (double v : design.y()) ymean += v;
  ymean /= static_cast<double>(n);
  double tss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = design.y()[i];
    fit.residuals[i] = y - fit.fitted[i];
    rss += fit.residuals[i] * fit.residuals[i];
    ysq += y * y;
    tss += (y - ymean) * (y - ymean);
  }
  // Residuals at rounding level count as an exact fit.
  if (rss <= 1e-26 * ysq || ysq == 0.0) rss = 0.0;
  fit.rss = rss;
  fit.sigma2_mle = rss / static_cast<double>(n);
  fit.loglik = gaussian_loglik(rss, n);
  fit.r_squared = tss > 0.0 ? 1.0 - rss / tss : 0.0;

  // Inverse of the upper-triangular R for the coefficient covariance.
  std::vector<std::vector<double>> rinv(r, std::vector<double>(r, 0.0));
  for (std::size_t c = 0; c < r; ++c) {
    rinv[c][c] = 1.0 / a[c][c];
    for (std::size_t ii = c; ii-- > 0;) {
      double s = 0.0;
      for (std::size_t k = ii + 1; k <= c; ++k) s += a[k][ii] * rinv[k][c];
      rinv[ii][c] = -s / a[ii][ii];
    }
  }
  const double df = static_cast<double>(n - r);
  const double s2 = rss / df;
  const double tcrit = student_t_quantile(0.975, df);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  fit.std_error.assign(p, nan);
  fit.t_value.assign(p, nan);
  fit.p_value.assign(p, nan);
  fit.ci_low.assign(p, nan);
  fit.ci_high.assign(p, nan);
  for (std::size_t jj = 0; jj < r; ++jj) {
    double v = 0.0;
    for (std::size_t c = jj; c < r; ++c) v += rinv[jj][c] * rinv[jj][c];
    const std::size_t j = kept_index[jj];
    const double se = std::sqrt(s2 * v);
    fit.std_error[j] = se;
    fit.ci_low[j] = fit.beta[j] - tcrit * se;
    fit.ci_high[j] = fit.beta[j] + tcrit * se;
    if (se > 0.0) {
      fit.t_value[j] = fit.beta[j] / se;
      fit.p_value[j] = student_t_two_sided_p(fit.t_value[j], df);
    }
  }
  return fit;
}

double delta_ll(const OlsFit& base, const OlsFit& full) {
  if (base.n != full.n) throw DataError("delta_ll: fits cover different row counts");
  for (const auto& c : base.columns)
    if (std::find(full.columns.begin(), full.columns.end(), c) == full.columns.end())
      throw DataError("delta_ll: base column " + c + " missing from full model (non-nested)");
  if (std::isinf(full.loglik)) return std::numeric_limits<double>::infinity();
  return full.loglik - base.loglik;
}

// ---------------------------------------------------------------------------

void add_word_surprisals(WordSurprisals& out, const SurprisalTable& table, LensKind lens, int layer,
                         int first_index) {
  auto it = table.words.find(lens);
  if (it == table.words.end()) throw DataError("surprisal table for " + table.seq_id + " lacks lens " +
                                               std::string(to_string(lens)));
  if (layer < 1 || layer > static_cast<int>(it->second.size()))
    throw DataError("layer " + std::to_string(layer) + " out of range for " + table.seq_id);
  const auto& words = it->second[layer - 1];
  for (std::size_t w = 0; w < words.size(); ++w)
    out[{table.seq_id, first_index + static_cast<int>(w)}] = words[w];
}

DesignPair build_design(std::span<const WordRecord> records, const WordSurprisals& surprisal,
                        const DesignOptions& options) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.covariates.attached)
      throw DataError("covariates not attached for " + r.seq_id + ":" + std::to_string(r.word_index));
    if (options.exclude_incomplete && !r.covariates.complete) continue;
    if (options.clause_final_only) {
      if (!r.clause_final) throw DataError("clause_final flag missing for " + r.seq_id + ":" +
                                           std::to_string(r.word_index));
      if (!*r.clause_final) continue;
    }
    if (options.baseline_amplitude && !r.baseline_amplitude)
      throw DataError("baseline_amplitude missing for " + r.seq_id + ":" + std::to_string(r.word_index));
    rows.push_back(i);
  }

  std::vector<std::string> missing;
  auto lookup = [&](const WordRecord& r, int lag) -> double {
    const int idx = r.word_index - lag;
    auto it = surprisal.find({r.seq_id, idx});
    if (it != surprisal.end()) return it->second;
    // Incomplete rows kept by request zero-fill context outside the sequence.
    if (lag > 0 && !r.covariates.complete) return 0.0;
    if (missing.size() < 20) missing.push_back(r.seq_id + ":" + std::to_string(idx));
    return 0.0;
  };

  const std::size_t n = rows.size();
  std::vector<double> y(n), s0(n), s1(n), s2(n), base_amp(n);
  std::array<std::vector<double>, 3> len, freq;
  for (auto& v : len) v.resize(n);
  for (auto& v : freq) v.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& r = records[rows[k]];
    y[k] = r.cost;
    s0[k] = lookup(r, 0);
    s1[k] = lookup(r, 1);
    s2[k] = lookup(r, 2);
    for (int lag = 0; lag < 3; ++lag) {
      len[lag][k] = r.covariates.length[lag];
      freq[lag][k] = r.covariates.log_freq[lag];
    }
    if (options.baseline_amplitude) base_amp[k] = *r.baseline_amplitude;
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("missing surprisal for words: " + list);
  }

  DesignPair out;
  out.record_index = rows;
  out.base = DesignMatrix(y);
  out.base.add_intercept();
  out.base.add_column("surprisal_tm1", s1);
  out.base.add_column("surprisal_tm2", s2);
  static const char* kLen[3] = {"length_t", "length_tm1", "length_tm2"};
  static const char* kFreq[3] = {"freq_t", "freq_tm1", "freq_tm2"};
  for (int lag = 0; lag < 3; ++lag) {
    out.base.add_column(kLen[lag], len[lag]);
    out.base.add_column(kFreq[lag], freq[lag]);
  }
  if (options.baseline_amplitude) out.base.add_column("baseline_amplitude", base_amp);
  out.full = out.base;
  out.full.add_column(std::string(kSurprisalColumn), s0);
  return out;
}

// ---------------------------------------------------------------------------

void write_delta_ll_tsv(std::ostream& out, std::span<const DeltaLLRecord> records) {
  out << kDeltaLLTsvHeader << '\n';
  for (const auto& r : records) {
    const double per_row = r.delta_ll_per_row();
    out << r.dataset_id << '\t' << r.model_id << '\t' << to_string(r.lens) << '\t' << r.layer << '\t'
        << r.n_rows << '\t' << format_double(per_row) << '\t' << format_double(per_row * 1000.0)
        << '\n';
  }
}

std::vector<DeltaLLRecord> read_delta_ll_tsv(std::istream& in) {
  std::vector<DeltaLLRecord> out;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    if (!header) {
      if (line != kDeltaLLTsvHeader) throw DataError("unexpected delta-LL TSV header: " + line);
      header = true;
      continue;
    }
    auto f = split_tabs(line);
    if (f.size() != 7) throw DataError("delta-LL TSV line " + std::to_string(line_no) + ": expected 7 fields");
    DeltaLLRecord r;
    r.dataset_id = f[0];
    r.model_id = f[1];
    r.lens = parse_lens_kind(f[2]);
    double per_row = 0.0;
    auto parse = [&](const std::string& s, auto& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size())
        throw DataError("delta-LL TSV line " + std::to_string(line_no) + ": bad number '" + s + "'");
    };
    parse(f[3], r.layer);
    parse(f[4], r.n_rows);
    if (f[5] == "inf") per_row = std::numeric_limits<double>::infinity();
    else if (f[5] == "-inf") per_row = -std::numeric_limits<double>::infinity();
    else parse(f[5], per_row);
    r.delta_ll = per_row * static_cast<double>(r.n_rows);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lenspsych
