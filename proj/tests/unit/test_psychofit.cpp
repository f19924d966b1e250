#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "lenspsych/errors.hpp"
#include "lenspsych/psychofit.hpp"
#include "support/oracle.hpp"

using namespace lenspsych;

namespace {

struct Instance {
  DesignMatrix design;
  std::vector<std::vector<double>> rows;
};

Instance random_instance(std::mt19937_64& rng, std::size_t n, std::size_t p) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<std::vector<double>> X(n, std::vector<double>(p));
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    X[i][0] = 1.0;
    for (std::size_t j = 1; j < p; ++j) X[i][j] = z(rng) * (1.0 + static_cast<double>(j));
    y[i] = 2.0 + z(rng);
    for (std::size_t j = 1; j < p; ++j) y[i] += 0.3 * X[i][j];
  }
  Instance out{DesignMatrix(y), X};
  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = X[i][j];
    out.design.add_column("x" + std::to_string(j), col);
  }
  return out;
}

}  // namespace

TEST_CASE("OLS agrees with the normal equations") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 30 + rng() % 100, p = 2 + rng() % 6;
    auto inst = random_instance(rng, n, p);
    const auto fit = ols_fit(inst.design);
    const auto ref = oracle::normal_equations(inst.rows, inst.design.y());
    REQUIRE(fit.rank == p);
    for (std::size_t j = 0; j < p; ++j)
      CHECK(std::abs(fit.beta[j] - static_cast<double>(ref.beta[j])) <=
            1e-8 * std::max(1.0, std::abs(static_cast<double>(ref.beta[j]))));
    CHECK(fit.loglik == doctest::Approx(static_cast<double>(ref.loglik)).epsilon(1e-10));
  }
}

TEST_CASE("simple regression standard errors and intervals") {
  const std::vector<double> x = {1, 2, 3, 4, 5, 6}, y = {1.1, 1.9, 3.2, 3.8, 5.1, 6.2};
  DesignMatrix d(y);
  d.add_intercept();
  d.add_column("x", x);
  const auto fit = ols_fit(d);
  double sxx = 0, mx = 3.5;
  for (double v : x) sxx += (v - mx) * (v - mx);
  const double s2 = fit.rss / 4.0;
  CHECK(fit.std_error[1] == doctest::Approx(std::sqrt(s2 / sxx)).epsilon(1e-10));
  CHECK(fit.t_value[1] == doctest::Approx(fit.beta[1] / fit.std_error[1]));
  const double q = 2.776445105;  // t_{0.975, 4}
  CHECK(fit.ci_high[1] - fit.beta[1] == doctest::Approx(q * fit.std_error[1]).epsilon(1e-7));
  CHECK(fit.sigma2_mle == doctest::Approx(fit.rss / 6.0));
  CHECK(fit.r_squared > 0.98);
  CHECK(fit.coefficient("x") == fit.beta[1]);
}

TEST_CASE("linearly dependent columns are dropped in column order") {
  const std::vector<double> a = {1, 2, 3, 4, 5}, y = {2, 1, 4, 3, 6};
  DesignMatrix d(y);
  d.add_intercept();
  d.add_column("a", a);
  std::vector<double> twice(5);
  for (int i = 0; i < 5; ++i) twice[i] = 2 * a[i] + 1;
  d.add_column("twice", twice);
  const auto fit = ols_fit(d);
  CHECK(fit.rank == 2);
  CHECK(fit.dropped == std::vector<std::string>{"twice"});
  CHECK_FALSE(fit.kept[2]);
  CHECK(fit.beta[2] == 0.0);
  CHECK(std::isnan(fit.std_error[2]));
}

TEST_CASE("exact fits give infinite log-likelihood") {
  DesignMatrix d(std::vector<double>{3, 5, 7, 9});
  d.add_intercept();
  d.add_column("x", {1, 2, 3, 4});
  const auto full = ols_fit(d);
  CHECK(full.exact());
  CHECK(std::isinf(full.loglik));
  DesignMatrix b(std::vector<double>{3, 5, 7, 9});
  b.add_intercept();
  CHECK(std::isinf(delta_ll(ols_fit(b), full)));
}

TEST_CASE("nested delta LL is non-negative and checked") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    auto inst = random_instance(rng, 40, 5);
    DesignMatrix base(inst.design.y());
    for (std::size_t j = 0; j < 3; ++j) base.add_column(inst.design.names()[j], inst.design.column(j));
    CHECK(delta_ll(ols_fit(base), ols_fit(inst.design)) >= -1e-9);
  }
  DesignMatrix other(std::vector<double>{1, 2, 3, 5});
  other.add_column("z", {1, 0, 1, 0});
  DesignMatrix full(std::vector<double>{1, 2, 3, 5});
  full.add_intercept();
  full.add_column("x", {1, 2, 3, 3});
  CHECK_THROWS_AS(delta_ll(ols_fit(other), ols_fit(full)), DataError);
}

TEST_CASE("too few rows are a data error") {
  DesignMatrix d(std::vector<double>{1, 2});
  d.add_intercept();
  d.add_column("x", {1, 2});
  d.add_column("z", {0, 5});
  CHECK_THROWS_AS(ols_fit(d), DataError);
}

TEST_CASE("reading design columns") {
  std::vector<WordRecord> recs(4);
  for (int i = 0; i < 4; ++i) {
    auto& r = recs[i];
    r.seq_id = "s1";
    r.word_index = i;
    r.cost = 300 + 10 * i;
    r.covariates.attached = true;
    r.covariates.complete = i >= 2;
    r.covariates.length = {double(i + 1), double(i), double(i - 1)};
    r.covariates.log_freq = {0.5 * i, 0.5 * (i - 1), 0.5 * (i - 2)};
  }
  WordSurprisals s;
  for (int i = 0; i < 4; ++i) s[{"s1", i}] = 1.0 + i;

  const auto pair = build_design(recs, s, {});
  CHECK(pair.base.names() == std::vector<std::string>{"intercept", "surprisal_tm1", "surprisal_tm2", "length_t",
                                                      "freq_t", "length_tm1", "freq_tm1", "length_tm2", "freq_tm2"});
  CHECK(pair.full.names().back() == kSurprisalColumn);
  CHECK(pair.record_index == std::vector<std::size_t>{2, 3});
  CHECK(pair.full.column(pair.full.index_of("surprisal_tm1")) == std::vector<double>{2.0, 3.0});
  CHECK(pair.full.column(pair.full.index_of("surprisal_t")) == std::vector<double>{3.0, 4.0});

  DesignOptions keep;
  keep.exclude_incomplete = false;
  const auto all = build_design(recs, s, keep);
  CHECK(all.base.rows() == 4);
  CHECK(all.base.column(all.base.index_of("surprisal_tm2"))[0] == 0.0);
  CHECK(all.base.column(all.base.index_of("length_tm1"))[0] == 0.0);

  DesignOptions n400;
  n400.baseline_amplitude = true;
  for (auto& r : recs) r.baseline_amplitude = 0.1;
  CHECK(build_design(recs, s, n400).base.has("baseline_amplitude"));

  s.erase({"s1", 3});
  CHECK_THROWS_AS(build_design(recs, s, {}), DataError);
}

TEST_CASE("delta LL TSV round-trips per-row values") {
  std::vector<DeltaLLRecord> recs = {{"d", "m", LensKind::tuned, 3, 200, 4.0}};
  std::ostringstream out;
  write_delta_ll_tsv(out, recs);
  CHECK(out.str() == std::string(kDeltaLLTsvHeader) + "\nd\tm\ttuned\t3\t200\t0.02\t20\n");
  std::istringstream in(out.str());
  const auto back = read_delta_ll_tsv(in);
  REQUIRE(back.size() == 1);
  CHECK(back[0].delta_ll == doctest::Approx(4.0));
  CHECK(back[0].lens == LensKind::tuned);
}
