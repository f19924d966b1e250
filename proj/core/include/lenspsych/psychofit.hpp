#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lenspsych/corpus.hpp"
#include "lenspsych/lens.hpp"

namespace lenspsych {

/// Named-column regression design, stored column-major.
class DesignMatrix {
 public:
  DesignMatrix() = default;
  explicit DesignMatrix(std::vector<double> y) : y_(std::move(y)) {}

  void add_column(std::string name, std::vector<double> values);
  void add_intercept() { add_column("intercept", std::vector<double>(y_.size(), 1.0)); }

  std::size_t rows() const { return y_.size(); }
  std::size_t cols() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<double>& column(std::size_t j) const { return cols_[j]; }
  const std::vector<double>& y() const { return y_; }
  double operator()(std::size_t i, std::size_t j) const { return cols_[j][i]; }
  std::size_t index_of(std::string_view name) const;  // throws if absent
  bool has(std::string_view name) const;

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<double>> cols_;
  std::vector<double> y_;
};

struct OlsFit {
  std::vector<std::string> columns;
  std::vector<bool> kept;               // false for columns dropped as linearly dependent
  std::vector<std::string> dropped;
  std::vector<double> beta;             // 0 for dropped columns
  std::vector<double> std_error;        // NaN for dropped columns
  std::vector<double> t_value;
  std::vector<double> p_value;          // two-sided
  std::vector<double> ci_low, ci_high;  // 95%
  std::vector<double> fitted;
  std::vector<double> residuals;
  std::size_t n = 0;
  std::size_t rank = 0;
  double rss = 0.0;
  double sigma2_mle = 0.0;
  double loglik = 0.0;  // +inf when the fit is exact
  double r_squared = 0.0;

  bool exact() const { return rss == 0.0; }
  std::size_t index_of(std::string_view name) const;
  double coefficient(std::string_view name) const { return beta[index_of(name)]; }
};

/// -n/2 (log(2 pi rss/n) + 1); +inf when rss == 0.
double gaussian_loglik(double rss, std::size_t n);

/// Householder QR in column order. A column whose remaining norm falls below
/// 1e-9 of its original norm is dropped; later columns lose to earlier ones.
OlsFit ols_fit(const DesignMatrix& design);

/// full.loglik - base.loglik. Base columns must be a subset of full columns
/// and both fits must cover the same rows.
double delta_ll(const OlsFit& base, const OlsFit& full);

// ---------------------------------------------------------------------------
// Reading-cost designs

/// Word surprisal keyed by (seq_id, word_index).
using WordSurprisals = std::map<std::pair<std::string, int>, double>;

/// Builds the lookup for one layer/lens from per-sequence tables. `first_index`
/// maps seq_id to the word_index of the table's word 0.
void add_word_surprisals(WordSurprisals& out, const SurprisalTable& table, LensKind lens, int layer,
                         int first_index = 0);

struct DesignOptions {
  bool exclude_incomplete = true;    // drop rows lacking w_{t-1} or w_{t-2}
  bool clause_final_only = false;
  bool baseline_amplitude = false;   // add the N400 baseline column
};

struct DesignPair {
  DesignMatrix base;
  DesignMatrix full;
  std::vector<std::size_t> record_index;  // source record for each row
};

inline constexpr std::string_view kSurprisalColumn = "surprisal_t";

/// base: intercept, surprisal_tm1, surprisal_tm2, length_t, freq_t, length_tm1,
/// freq_tm1, length_tm2, freq_tm2 (+ baseline_amplitude); full appends
/// surprisal_t. Records need covariates attached.
DesignPair build_design(std::span<const WordRecord> records, const WordSurprisals& surprisal,
                        const DesignOptions& options);

struct DeltaLLRecord {
  std::string dataset_id;
  std::string model_id;
  LensKind lens = LensKind::logit;
  int layer = 0;
  std::size_t n_rows = 0;
  double delta_ll = 0.0;  // total
  double delta_ll_per_row() const { return n_rows ? delta_ll / static_cast<double>(n_rows) : 0.0; }
};

inline constexpr std::string_view kDeltaLLTsvHeader =
    "dataset\tmodel\tlens\tlayer\tn_rows\tdelta_ll\tdelta_ll_x1000";

/// delta_ll column is per row; delta_ll_x1000 is the same value times 1000.
void write_delta_ll_tsv(std::ostream& out, std::span<const DeltaLLRecord> records);
std::vector<DeltaLLRecord> read_delta_ll_tsv(std::istream& in);

}  // namespace lenspsych
