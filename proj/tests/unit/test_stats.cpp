#include <doctest.h>

#include <cmath>
#include <vector>

#include "lenspsych/errors.hpp"
#include "lenspsych/stats.hpp"

using namespace lenspsych;

TEST_CASE("incomplete beta against the binomial closed form") {
  // I_x(2, 3) = 1 - (1-x)^4 - 4 x (1-x)^3
  for (double x : {0.1, 0.4, 0.75}) {
    const double closed = 1.0 - std::pow(1 - x, 4) - 4 * x * std::pow(1 - x, 3);
    CHECK(incomplete_beta(2, 3, x) == doctest::Approx(closed).epsilon(1e-12));
  }
  CHECK(incomplete_beta(2, 3, 0.0) == 0.0);
  CHECK(incomplete_beta(2, 3, 1.0) == 1.0);
}

TEST_CASE("Student t distribution") {
  // Cauchy and df = 2 have elementary CDFs.
  CHECK(student_t_cdf(1.0, 1.0) == doctest::Approx(0.75).epsilon(1e-12));
  for (double t : {-3.0, 0.5, 2.2}) {
    CHECK(student_t_cdf(t, 1.0) == doctest::Approx(0.5 + std::atan(t) / M_PI).epsilon(1e-12));
    CHECK(student_t_cdf(t, 2.0) == doctest::Approx(0.5 + t / (2 * std::sqrt(2 + t * t))).epsilon(1e-12));
  }
  CHECK(student_t_cdf(0.0, 7.0) == 0.5);
  CHECK(student_t_cdf(2.0, 10.0) == doctest::Approx(0.963305982).epsilon(1e-8));
  CHECK(student_t_quantile(0.975, 10.0) == doctest::Approx(2.228138852).epsilon(1e-8));
  CHECK(student_t_quantile(0.5, 3.0) == doctest::Approx(0.0));
  CHECK(student_t_two_sided_p(2.0, 10.0) == doctest::Approx(2 * (1 - 0.963305982)).epsilon(1e-7));
  CHECK(student_t_two_sided_p(-2.0, 10.0) == student_t_two_sided_p(2.0, 10.0));
}

TEST_CASE("Pearson correlation") {
  const std::vector<double> x = {1, 2, 3, 4, 5}, y = {3, 5, 7, 9, 11}, z = {5, 4, 3, 2, 1};
  CHECK(pearson(x, y).r == doctest::Approx(1.0));
  CHECK(pearson(x, z).r == doctest::Approx(-1.0));
  const std::vector<double> flat = {2, 2, 2, 2, 2};
  const auto d = pearson(x, flat);
  CHECK(d.degenerate);
  CHECK(d.r == 0.0);
  CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{2}), DataError);
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), DataError);
}

TEST_CASE("one-sided t-test of a positive mean") {
  const std::vector<double> v = {1, 2, 3};
  const auto t = t_test_mean_positive(v);
  CHECK(t.mean == 2.0);
  CHECK(t.t == doctest::Approx(2 * std::sqrt(3.0)));
  const double tt = 2 * std::sqrt(3.0);
  CHECK(t.p == doctest::Approx(0.5 - tt / (2 * std::sqrt(2 + tt * tt))).epsilon(1e-10));

  const auto zero = t_test_mean_positive(std::vector<double>{0, 0, 0});
  CHECK(zero.t == 0.0);
  CHECK(zero.p == 0.5);
  CHECK_THROWS_AS(t_test_mean_positive(std::vector<double>{0.3, 0.3}), DataError);
  CHECK_THROWS_AS(t_test_mean_positive(std::vector<double>{1.0}), DataError);
}

TEST_CASE("least-squares line") {
  const std::vector<double> x = {0, 1, 2, 3}, y = {1, 3, 5, 7};
  const auto f = fit_line(x, y);
  CHECK(f.slope == doctest::Approx(2.0));
  CHECK(f.intercept == doctest::Approx(1.0));
  CHECK_THROWS_AS(fit_line(std::vector<double>{1, 1}, std::vector<double>{1, 2}), DataError);
}
