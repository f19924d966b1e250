#include <doctest.h>

#include <cmath>
#include <sstream>

#include "lenspsych/errors.hpp"
#include "lenspsych/io_util.hpp"
#include "lenspsych/meta_analysis.hpp"
#include "lenspsych/synthetic.hpp"

using namespace lenspsych;

namespace {

DeltaLLRecord rec(std::string model, int layer, double per_row, std::string dataset = "d",
                  LensKind lens = LensKind::logit) {
  return {std::move(dataset), std::move(model), lens, layer, 100, per_row * 100.0};
}

OlsFit one_coefficient(const std::string& name, double beta, double t) {
  OlsFit f;
  f.columns = {name};
  f.kept = {true};
  f.beta = {beta};
  f.std_error = {beta / t};
  f.t_value = {t};
  f.p_value = {0.0};
  f.ci_low = {beta - 1.96 * beta / t};
  f.ci_high = {beta + 1.96 * beta / t};
  return f;
}

}  // namespace

TEST_CASE("depth bins use integer arithmetic") {
  CHECK(depth_bin(1, 5) == 1);
  CHECK(depth_bin(3, 5) == 3);  // 0.6 exactly
  CHECK(depth_bin(5, 5) == 4);
  CHECK(depth_bin(1, 10) == 0);
  CHECK(depth_bin(2, 10) == 1);
  CHECK(depth_bin(12, 12) == 4);
  CHECK(relative_depth(3, 12) == 0.25);
  CHECK_THROWS_AS(depth_bin(0, 4), DataError);
  CHECK_THROWS_AS(depth_bin(5, 4), DataError);
}

TEST_CASE("depth-binned table pools models and skips non-finite values") {
  std::vector<DeltaLLRecord> r = {rec("a", 1, 0.010), rec("a", 2, 0.020), rec("b", 1, 0.001), rec("b", 2, 0.002),
                                  rec("b", 3, 0.003), rec("b", 4, 0.030)};
  r.push_back({"d", "b", LensKind::logit, 4, 100, std::numeric_limits<double>::infinity()});
  const auto rows = depth_binned_table(r, {});
  REQUIRE(rows.size() == 1);
  // a: L=2 -> bins 2, 4; b: L=4 -> bins 1, 2, 3, 4
  CHECK(rows[0].count == std::array<std::size_t, 5>{0, 1, 2, 1, 2});
  CHECK(rows[0].mean[2] == doctest::Approx(0.006));
  CHECK(rows[0].mean[4] == doctest::Approx(0.025));
  CHECK(rows[0].best_bin == 4);
  std::ostringstream out;
  write_table1_tsv(out, rows);
  CHECK(out.str().find("d\tlogit\tNA\t1.00\t6.00\t3.00\t25.00*\t0.8-1.0\n") != std::string::npos);
}

TEST_CASE("best layer prefers the shallower layer on ties") {
  const std::vector<DeltaLLRecord> r = {rec("m", 1, 0.1), rec("m", 3, 0.3), rec("m", 2, 0.3)};
  CHECK(best_layer(r) == std::pair<int, double>{2, 0.3});
  CHECK_THROWS_AS(best_layer(std::vector<DeltaLLRecord>{}), DataError);
}

TEST_CASE("win rate formats like the published table") {
  // Eight of ten layers beat the best last layer in the family.
  ModelRegistry reg = {{"xl", {"xl", "gpt2", 1.5e9, 10}}, {"small", {"small", "gpt2", 1.2e8, 4}}};
  std::vector<DeltaLLRecord> r;
  const double xl[] = {0.001, 0.03, 0.05, 0.06, 0.07, 0.08, 0.07, 0.06, 0.05, 0.02};
  for (int l = 1; l <= 10; ++l) r.push_back(rec("xl", l, xl[l - 1]));
  for (int l = 1; l <= 4; ++l) r.push_back(rec("small", l, 0.005 * l));
  const auto rows = win_rate_table(r, reg);
  REQUIRE(rows.size() == 2);
  const auto& row = rows[1].model_id == "xl" ? rows[1] : rows[0];
  CHECK(row.reference == doctest::Approx(0.02));
  CHECK(row.win_rate == doctest::Approx(0.8));
  std::ostringstream out;
  write_table2_tsv(out, rows);
  CHECK(out.str().find("d\tlogit\txl\tgpt2\t10\t20.00\t0.80\n") != std::string::npos);

  ModelRegistry missing = {{"xl", {"xl", "", 1.5e9, 10}}};
  CHECK_THROWS_AS(win_rate_table(r, missing), DataError);
}

TEST_CASE("scaling effect on log parameter counts") {
  const std::vector<ScalingPoint> p = {{"a", 1e8, 0.01}, {"b", 1e9, 0.02}, {"c", 1e10, 0.03}};
  const auto e = scaling_effect(p);
  CHECK(e.pearson_r == doctest::Approx(1.0));
  CHECK(e.slope == doctest::Approx(0.01));
  const std::vector<ScalingPoint> flat = {{"a", 1e8, 0.01}, {"b", 1e9, 0.01}, {"c", 1e10, 0.01}};
  CHECK(scaling_effect(flat).degenerate);
  CHECK_THROWS_AS(scaling_effect(std::span(p).first(2)), DataError);

  ModelRegistry reg = {{"s", {"s", "f", 1e8, 2}}, {"m", {"m", "f", 1e9, 2}}, {"l", {"l", "f", 1e10, 2}}};
  std::vector<DeltaLLRecord> r = {rec("s", 1, 0.03), rec("s", 2, 0.01), rec("m", 1, 0.02), rec("m", 2, 0.02),
                                  rec("l", 1, 0.01), rec("l", 2, 0.03)};
  const auto series = scaling_series(r, reg);
  REQUIRE(series.size() == 2);
  CHECK(series[0].mode == ScalingMode::best_layer);
  CHECK(series[0].points[0].delta_ll == doctest::Approx(0.03));
  CHECK(series[1].points[0].delta_ll == doctest::Approx(0.01));
  CHECK(scaling_effect(series[1].points).pearson_r == doctest::Approx(1.0));
}

TEST_CASE("correlation values print at two decimals") {
  // x and e are centred, orthogonal and of equal norm, so r(x, y) is exact.
  const std::vector<double> x = {-3, -1, 1, 3}, e = {1, -1, -1, 1};
  for (double target : {-0.92, 0.95}) {
    std::vector<double> y;
    const double s = std::sqrt(5.0) * std::sqrt(1 - target * target);
    for (std::size_t i = 0; i < 4; ++i) y.push_back(target * x[i] + s * e[i]);
    CHECK(pearson(x, y).r == doctest::Approx(target).epsilon(1e-12));
    CHECK(format_fixed(pearson(x, y).r, 2) == format_fixed(target, 2));
  }
}

TEST_CASE("coefficient tables print four-decimal betas and three-decimal t values") {
  std::ostringstream a, b;
  write_coefficients_tsv(a, one_coefficient("measure[T.MAZE]:layer_depth", 0.0782, 74.603));
  write_coefficients_tsv(b, one_coefficient("length", 0.3629, 51.621));
  CHECK(a.str().find("measure[T.MAZE]:layer_depth\t0.0782\t0.001\t74.603\t") != std::string::npos);
  CHECK(b.str().find("length\t0.3629\t0.007\t51.621\t") != std::string::npos);
}

TEST_CASE("interaction regression column naming and planted signs") {
  const auto rows = planted_settings(1);
  const auto fit = interaction_regression(rows);
  const auto& f = fit.fit;
  CHECK(f.columns.front() == "Intercept");
  CHECK(fit.reference_level.at("measure") == "FPGD");
  CHECK(fit.measure_levels == std::vector<std::string>{"FPGD", "MAZE", "SPR"});
  CHECK(f.index_of("measure[T.MAZE]:layer_depth") < f.columns.size());
  CHECK(f.index_of("model[T.medium]") < f.columns.size());
  CHECK(fit.nuisance_columns.size() == 1 + 2 + 1);
  CHECK(f.coefficient("measure[T.MAZE]:layer_depth") > 0.0);
  CHECK(f.p_value[f.index_of("measure[T.MAZE]:layer_depth")] < 0.001);

  std::vector<SettingRow> one_measure(rows.begin(), rows.end());
  for (auto& r : one_measure) r.measure = "SPR";
  CHECK_THROWS_AS(interaction_regression(one_measure), DataError);
}

TEST_CASE("corrected curves remove nuisance effects") {
  PlantedSettingsOptions o;
  o.noise = 0.0;
  const auto rows = planted_settings(2, o);
  const auto fit = interaction_regression(rows);
  const auto curves = corrected_dll_curves(rows, fit);
  REQUIRE(curves.size() == 3);
  for (const auto& c : curves) {
    // With no noise the corrected points lie on a line: c == 0 and b equals the planted slope.
    CHECK(c.c == doctest::Approx(0.0).epsilon(1e-8).scale(1.0));
    CHECK(c.b == doctest::Approx(o.measure_slope.at(c.measure)).epsilon(1e-8));
  }
}

TEST_CASE("residual error regression") {
  std::vector<ErrorRow> rows;
  const char* tags[] = {"NN", "VB", "DT"};
  for (int i = 0; i < 60; ++i) {
    ErrorRow r;
    r.model_id = i % 2 ? "a" : "b";
    r.length = 1 + i % 7;
    r.freq = std::sin(i);
    r.position = i % 11;
    r.pos = tags[i % 3];
    r.has_punct = i % 5 == 0;
    r.has_num = i % 13 == 0;
    r.error_decrease = 0.5 * r.length + std::cos(i * 1.7);
    rows.push_back(r);
  }
  const auto f = residual_error_regression(rows);
  CHECK(f.columns == std::vector<std::string>{"Intercept", "model[T.b]", "pos[T.NN]", "pos[T.VB]", "has_punct",
                                              "has_num", "length", "freq", "position"});
  CHECK(f.coefficient("length") == doctest::Approx(0.5).epsilon(0.2));
  CHECK(word_has_punct("dog,"));
  CHECK_FALSE(word_has_punct("dog"));
  CHECK(word_has_num("1999"));
  rows[0].pos.clear();
  CHECK_THROWS_AS(residual_error_regression(rows), DataError);
}

TEST_CASE("contextualization correlations by depth") {
  const std::vector<double> bigram = {1, 2, 3, 4, 5}, reference = {5, 3, 4, 1, 2};
  std::vector<std::vector<double>> layers;
  for (int l = 0; l < 4; ++l) {
    std::vector<double> s;
    const double w = l / 3.0;
    for (std::size_t i = 0; i < 5; ++i) s.push_back((1 - w) * bigram[i] + w * reference[i]);
    layers.push_back(s);
  }
  const auto r = contextualization_correlation(layers, bigram, reference);
  CHECK(r.layers.front().bigram.r == doctest::Approx(1.0));
  CHECK(r.layers.back().reference.r == doctest::Approx(1.0));
  CHECK(r.depth_vs_bigram.r < -0.9);
  CHECK(r.depth_vs_reference.r > 0.9);
  CHECK_THROWS_AS(contextualization_correlation(layers, std::span(bigram).first(2), std::span(reference).first(2)),
                  DataError);
}
