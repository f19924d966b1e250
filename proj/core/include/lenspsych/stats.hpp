#pragma once

#include <cstddef>
#include <span>

namespace lenspsych {

struct PearsonResult {
  double r = 0.0;
  bool degenerate = false;  // one side has zero variance; r reported as 0
  std::size_t n = 0;
};

/// Needs at least 2 paired values.
PearsonResult pearson(std::span<const double> x, std::span<const double> y);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);

double student_t_cdf(double t, double df);
double student_t_quantile(double p, double df);

/// Two-sided p-value for a t statistic.
double student_t_two_sided_p(double t, double df);

struct TTestResult {
  double mean = 0.0;
  double t = 0.0;
  double p = 0.5;  // one-sided, H1: mean > 0
  std::size_t n = 0;
};

/// One-sample one-sided t-test against 0. All-zero input gives t = 0, p = 0.5;
/// zero variance with a nonzero mean is a DataError.
TTestResult t_test_mean_positive(std::span<const double> values);

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
};

/// Least-squares line y = a + b x. Needs non-constant x.
LineFit fit_line(std::span<const double> x, std::span<const double> y);

}  // namespace lenspsych
