#include "lenspsych/meta_analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <ostream>
#include <set>
#include <tuple>

#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"

namespace lenspsych {

double relative_depth(int layer, int n_layers) {
  if (n_layers < 1 || layer < 1 || layer > n_layers)
    throw DataError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(n_layers));
  return static_cast<double>(layer) / static_cast<double>(n_layers);
}

int depth_bin(int layer, int n_layers) {
  relative_depth(layer, n_layers);  // range check
  // floor(5 l / L) in integers avoids 0.6 * 5 landing just below 3.
  return std::min(kDepthBins - 1, (kDepthBins * layer) / n_layers);
}

int model_layers(const ModelRegistry& registry, std::string_view model_id,
                 std::span<const DeltaLLRecord> records) {
  if (auto it = registry.find(std::string(model_id)); it != registry.end() && it->second.n_layers > 0)
    return it->second.n_layers;
  int deepest = 0;
  for (const auto& r : records)
    if (r.model_id == model_id) deepest = std::max(deepest, r.layer);
  if (deepest == 0) throw DataError("no layers recorded for model " + std::string(model_id));
  return deepest;
}

namespace {

using GroupKey = std::tuple<std::string, LensKind, std::string>;  // dataset, lens, model

std::map<GroupKey, std::vector<DeltaLLRecord>> group_records(std::span<const DeltaLLRecord> records) {
  std::map<GroupKey, std::vector<DeltaLLRecord>> out;
  for (const auto& r : records) out[{r.dataset_id, r.lens, r.model_id}].push_back(r);
  for (auto& [k, v] : out)
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.layer < b.layer; });
  return out;
}

}  // namespace

std::vector<DepthBinRow> depth_binned_table(std::span<const DeltaLLRecord> records,
                                            const ModelRegistry& registry) {
  std::map<std::pair<std::string, LensKind>, std::pair<std::array<double, kDepthBins>,
                                                       std::array<std::size_t, kDepthBins>>>
      acc;
  std::map<std::string, int> layers;
  for (const auto& r : records) {
    auto [it, inserted] = layers.try_emplace(r.model_id, 0);
    if (inserted) it->second = model_layers(registry, r.model_id, records);
    const double v = r.delta_ll_per_row();
    auto& [sum, count] = acc[{r.dataset_id, r.lens}];
    if (!std::isfinite(v)) continue;
    const int bin = depth_bin(r.layer, it->second);
    sum[bin] += v;
    count[bin] += 1;
  }
  std::vector<DepthBinRow> out;
  for (const auto& [key, value] : acc) {
    DepthBinRow row;
    row.dataset_id = key.first;
    row.lens = key.second;
    row.count = value.second;
    for (int b = 0; b < kDepthBins; ++b) {
      row.mean[b] = row.count[b] ? value.first[b] / static_cast<double>(row.count[b])
                                 : std::numeric_limits<double>::quiet_NaN();
      if (row.count[b] && (row.best_bin < 0 || row.mean[b] > row.mean[row.best_bin])) row.best_bin = b;
    }
    out.push_back(row);
  }
  return out;
}

void write_table1_tsv(std::ostream& out, std::span<const DepthBinRow> rows) {
  out << "dataset\tlens";
  for (auto label : kDepthBinLabels) out << '\t' << label;
  out << "\tbest_bin\n";
  for (const auto& r : rows) {
    out << r.dataset_id << '\t' << to_string(r.lens);
    for (int b = 0; b < kDepthBins; ++b) {
      out << '\t';
      if (r.count[b] == 0) {
        out << "NA";
        continue;
      }
      out << format_fixed(r.mean[b] * 1000.0, 2);
      if (b == r.best_bin) out << '*';
    }
    out << '\t' << (r.best_bin >= 0 ? kDepthBinLabels[r.best_bin] : "NA") << '\n';
  }
  out << "# delta LL per row x1000; depth = layer / n_layers; bins [lo, hi), last bin closed at 1.0\n";
}

std::pair<int, double> best_layer(std::span<const DeltaLLRecord> records) {
  if (records.empty()) throw DataError("best_layer needs at least one record");
  const DeltaLLRecord* best = nullptr;
  for (const auto& r : records) {
    const double v = r.delta_ll_per_row();
    if (!best || v > best->delta_ll_per_row() ||
        (v == best->delta_ll_per_row() && r.layer < best->layer))
      best = &r;
  }
  return {best->layer, best->delta_ll_per_row()};
}

double win_rate(std::span<const double> values, double reference) {
  if (values.empty()) throw DataError("win_rate needs at least one layer");
  std::size_t wins = 0;
  for (double v : values) wins += v > reference;
  return static_cast<double>(wins) / static_cast<double>(values.size());
}

std::vector<WinRateRow> win_rate_table(std::span<const DeltaLLRecord> records,
                                       const ModelRegistry& registry) {
  const auto groups = group_records(records);
  auto family_of = [&](const std::string& model) -> const std::string& {
    auto it = registry.find(model);
    if (it == registry.end() || it->second.family.empty())
      throw DataError("unknown family for model " + model);
    return it->second.family;
  };
  // Best last-layer delta LL per (dataset, lens, family).
  std::map<std::tuple<std::string, LensKind, std::string>, double> reference;
  for (const auto& [key, recs] : groups) {
    const auto& [dataset, lens, model] = key;
    const int L = model_layers(registry, model, records);
    for (const auto& r : recs) {
      if (r.layer != L) continue;
      auto [it, inserted] = reference.try_emplace({dataset, lens, family_of(model)}, r.delta_ll_per_row());
      if (!inserted) it->second = std::max(it->second, r.delta_ll_per_row());
    }
  }
  std::vector<WinRateRow> out;
  for (const auto& [key, recs] : groups) {
    const auto& [dataset, lens, model] = key;
    const auto& family = family_of(model);
    auto ref = reference.find({dataset, lens, family});
    if (ref == reference.end())
      throw DataError("no last-layer delta LL for family " + family + " on " + dataset);
    std::vector<double> values;
    for (const auto& r : recs) values.push_back(r.delta_ll_per_row());
    WinRateRow row;
    row.dataset_id = dataset;
    row.model_id = model;
    row.family = family;
    row.lens = lens;
    row.reference = ref->second;
    row.win_rate = win_rate(values, ref->second);
    row.layers = values.size();
    out.push_back(row);
  }
  return out;
}

void write_table2_tsv(std::ostream& out, std::span<const WinRateRow> rows) {
  out << "dataset\tlens\tmodel\tfamily\tlayers\treference_x1000\twin_rate\n";
  for (const auto& r : rows)
    out << r.dataset_id << '\t' << to_string(r.lens) << '\t' << r.model_id << '\t' << r.family << '\t'
        << r.layers << '\t' << format_fixed(r.reference * 1000.0, 2) << '\t'
        << format_fixed(r.win_rate, 2) << '\n';
}

std::string_view to_string(ScalingMode mode) {
  return mode == ScalingMode::best_layer ? "best_layer" : "last_layer";
}

ScalingResult scaling_effect(std::span<const ScalingPoint> points) {
  if (points.size() < 3) throw DataError("scaling analysis needs at least 3 models");
  std::vector<double> x, y;
  for (const auto& p : points) {
    if (!(p.param_count > 0.0)) throw DataError("parameter count for " + p.model_id + " must be positive");
    x.push_back(std::log10(p.param_count));
    y.push_back(p.delta_ll);
  }
  ScalingResult out;
  out.n = points.size();
  const auto r = pearson(x, y);
  out.pearson_r = r.r;
  out.degenerate = r.degenerate;
  if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) != x.end()) {
    const auto line = fit_line(x, y);
    out.slope = line.slope;
    out.intercept = line.intercept;
  }
  return out;
}

std::vector<ScalingSeries> scaling_series(std::span<const DeltaLLRecord> records,
                                          const ModelRegistry& registry) {
  const auto groups = group_records(records);
  std::map<std::pair<std::string, LensKind>, std::array<ScalingSeries, 2>> series;
  for (const auto& [key, recs] : groups) {
    const auto& [dataset, lens, model] = key;
    auto info = registry.find(model);
    if (info == registry.end() || !(info->second.param_count > 0.0)) continue;
    auto& pair = series[{dataset, lens}];
    const int L = model_layers(registry, model, records);
    const auto [layer, best] = best_layer(recs);
    double last = std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : recs)
      if (r.layer == L) last = r.delta_ll_per_row();
    pair[0].points.push_back({model, info->second.param_count, best});
    if (!std::isnan(last)) pair[1].points.push_back({model, info->second.param_count, last});
  }
  std::vector<ScalingSeries> out;
  for (auto& [key, pair] : series) {
    for (int m = 0; m < 2; ++m) {
      pair[m].dataset_id = key.first;
      pair[m].lens = key.second;
      pair[m].mode = m == 0 ? ScalingMode::best_layer : ScalingMode::last_layer;
      std::sort(pair[m].points.begin(), pair[m].points.end(),
                [](const auto& a, const auto& b) { return a.param_count < b.param_count; });
      out.push_back(std::move(pair[m]));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> levels(std::span<const SettingRow> rows, std::string SettingRow::*field) {
  std::set<std::string> s;
  for (const auto& r : rows) s.insert(r.*field);
  return {s.begin(), s.end()};
}

void add_dummies(DesignMatrix& design, std::span<const SettingRow> rows, std::string_view factor,
                 std::string SettingRow::*field, const std::vector<std::string>& lv,
                 const std::string& reference, std::vector<std::size_t>* indices) {
  for (const auto& level : lv) {
    if (level == reference) continue;
    std::vector<double> col(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = rows[i].*field == level ? 1.0 : 0.0;
    if (indices) indices->push_back(design.cols());
    design.add_column(std::string(factor) + "[T." + level + "]", std::move(col));
  }
}

}  // namespace

InteractionFit interaction_regression(std::span<const SettingRow> rows) {
  const auto measures = levels(rows, &SettingRow::measure);
  if (measures.size() < 2) throw DataError("interaction regression needs at least 2 measure levels");
  std::set<double> depths;
  for (const auto& r : rows) depths.insert(r.layer_depth);
  if (depths.size() < 2) throw DataError("interaction regression needs at least 2 layer depths");

  InteractionFit out;
  std::vector<double> y;
  for (const auto& r : rows) y.push_back(r.delta_ll);
  DesignMatrix design(y);
  design.add_column("Intercept", std::vector<double>(rows.size(), 1.0));

  struct Factor {
    const char* name;
    std::string SettingRow::*field;
  };
  for (const Factor f : {Factor{"stimuli", &SettingRow::stimuli}, Factor{"model", &SettingRow::model},
                         Factor{"lens", &SettingRow::lens}}) {
    const auto lv = levels(rows, f.field);
    out.reference_level[f.name] = lv.front();
    add_dummies(design, rows, f.name, f.field, lv, lv.front(), &out.nuisance_columns);
  }
  const std::string measure_ref =
      std::find(measures.begin(), measures.end(), "FPGD") != measures.end() ? "FPGD" : measures.front();
  out.reference_level["measure"] = measure_ref;
  out.measure_levels.push_back(measure_ref);
  for (const auto& m : measures)
    if (m != measure_ref) out.measure_levels.push_back(m);
  add_dummies(design, rows, "measure", &SettingRow::measure, measures, measure_ref, nullptr);

  std::vector<double> depth;
  for (const auto& r : rows) depth.push_back(r.layer_depth);
  design.add_column("layer_depth", depth);
  for (const auto& m : measures) {
    if (m == measure_ref) continue;
    std::vector<double> col(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = rows[i].measure == m ? rows[i].layer_depth : 0.0;
    design.add_column("measure[T." + m + "]:layer_depth", std::move(col));
  }
  out.fit = ols_fit(design);
  return out;
}

void write_coefficients_tsv(std::ostream& out, const OlsFit& fit) {
  out << "term\tcoef\tstd_err\tt\tp\tci_low\tci_high\n";
  auto num = [](double v, int digits) { return std::isnan(v) ? std::string("NA") : format_fixed(v, digits); };
  for (std::size_t j = 0; j < fit.columns.size(); ++j) {
    if (!fit.kept[j]) continue;
    out << fit.columns[j] << '\t' << num(fit.beta[j], 4) << '\t' << num(fit.std_error[j], 3) << '\t'
        << num(fit.t_value[j], 3) << '\t' << num(fit.p_value[j], 3) << '\t' << num(fit.ci_low[j], 3)
        << '\t' << num(fit.ci_high[j], 3) << '\n';
  }
  for (const auto& d : fit.dropped) out << "# dropped (linearly dependent): " << d << '\n';
}

std::vector<CorrectedCurve> corrected_dll_curves(std::span<const SettingRow> rows,
                                                 const InteractionFit& fit) {
  const auto& f = fit.fit;
  auto dummy_value = [](const SettingRow& r, const std::string& column) {
    // column looks like factor[T.level]
    const auto open = column.find("[T.");
    const std::string factor = column.substr(0, open);
    const std::string level = column.substr(open + 3, column.size() - open - 4);
    const std::string& v = factor == "stimuli" ? r.stimuli : factor == "model" ? r.model : r.lens;
    return v == level ? 1.0 : 0.0;
  };
  std::map<std::string, std::vector<std::pair<double, double>>> by_measure;
  for (const auto& r : rows) {
    double corrected = r.delta_ll;
    for (auto j : fit.nuisance_columns)
      if (f.kept[j]) corrected -= f.beta[j] * dummy_value(r, f.columns[j]);
    by_measure[r.measure].push_back({r.layer_depth, corrected});
  }
  std::vector<CorrectedCurve> out;
  for (const auto& m : fit.measure_levels) {
    auto it = by_measure.find(m);
    if (it == by_measure.end()) continue;
    CorrectedCurve curve;
    curve.measure = m;
    curve.points = it->second;
    std::sort(curve.points.begin(), curve.points.end());
    std::vector<double> y, d1, d2;
    for (const auto& [d, v] : curve.points) {
      y.push_back(v);
      d1.push_back(d);
      d2.push_back(d * d);
    }
    if (y.size() > 3) {
      DesignMatrix design(y);
      design.add_intercept();
      design.add_column("depth", d1);
      design.add_column("depth2", d2);
      const auto q = ols_fit(design);
      curve.a = q.beta[0];
      curve.b = q.beta[1];
      curve.c = q.beta[2];
    }
    out.push_back(std::move(curve));
  }
  return out;
}

// ---------------------------------------------------------------------------

bool word_has_punct(std::string_view word) {
  return std::any_of(word.begin(), word.end(), [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 0x80 && std::ispunct(u);
  });
}

bool word_has_num(std::string_view word) {
  return std::any_of(word.begin(), word.end(), [](char c) { return c >= '0' && c <= '9'; });
}

OlsFit residual_error_regression(std::span<const ErrorRow> rows) {
  std::vector<double> y;
  std::set<std::string> models, tags;
  for (const auto& r : rows) {
    y.push_back(r.error_decrease);
    models.insert(r.model_id);
    if (r.pos.empty()) throw DataError("error regression row lacks a POS tag");
    tags.insert(r.pos);
  }
  DesignMatrix design(y);
  design.add_column("Intercept", std::vector<double>(rows.size(), 1.0));
  auto dummies = [&](const char* factor, const std::set<std::string>& lv, std::string ErrorRow::*field) {
    for (auto it = std::next(lv.begin()); it != lv.end(); ++it) {
      std::vector<double> col(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) col[i] = rows[i].*field == *it ? 1.0 : 0.0;
      design.add_column(std::string(factor) + "[T." + *it + "]", std::move(col));
    }
  };
  if (!rows.empty()) {
    dummies("model", models, &ErrorRow::model_id);
    dummies("pos", tags, &ErrorRow::pos);
  }
  auto numeric = [&](const char* name, auto get) {
    std::vector<double> col;
    for (const auto& r : rows) col.push_back(get(r));
    design.add_column(name, std::move(col));
  };
  numeric("has_punct", [](const ErrorRow& r) { return r.has_punct ? 1.0 : 0.0; });
  numeric("has_num", [](const ErrorRow& r) { return r.has_num ? 1.0 : 0.0; });
  numeric("length", [](const ErrorRow& r) { return r.length; });
  numeric("freq", [](const ErrorRow& r) { return r.freq; });
  numeric("position", [](const ErrorRow& r) { return r.position; });
  return ols_fit(design);
}

ContextualizationResult contextualization_correlation(
    std::span<const std::vector<double>> layer_surprisal, std::span<const double> bigram,
    std::span<const double> reference) {
  if (bigram.size() != reference.size()) throw DataError("comparator series differ in length");
  if (bigram.size() < 3) throw DataError("contextualization needs at least 3 aligned words");
  ContextualizationResult out;
  const int L = static_cast<int>(layer_surprisal.size());
  std::vector<double> depth, rb, rr;
  for (int l = 1; l <= L; ++l) {
    const auto& s = layer_surprisal[l - 1];
    if (s.size() != bigram.size()) throw DataError("layer " + std::to_string(l) + " surprisal not aligned");
    ContextualizationRow row;
    row.layer = l;
    row.depth = relative_depth(l, L);
    row.bigram = pearson(s, bigram);
    row.reference = pearson(s, reference);
    depth.push_back(row.depth);
    rb.push_back(row.bigram.r);
    rr.push_back(row.reference.r);
    out.layers.push_back(row);
  }
  if (L >= 2) {
    out.depth_vs_bigram = pearson(depth, rb);
    out.depth_vs_reference = pearson(depth, rr);
  } else {
    out.depth_vs_bigram.degenerate = out.depth_vs_reference.degenerate = true;
  }
  return out;
}

}  // namespace lenspsych
