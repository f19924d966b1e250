#include <doctest.h>

#include <cmath>

#include "lenspsych/errors.hpp"
#include "lenspsych/ngram.hpp"
#include "lenspsych/synthetic.hpp"
#include "support/oracle.hpp"
#include "support/temp_dir.hpp"

using namespace lenspsych;

namespace {

const std::vector<std::string> kAbab = {"a b a b"};

double context_sum(const BigramModel& m, std::string_view ctx) {
  double s = 0.0;
  for (const auto& w : m.vocabulary()) s += m.prob(ctx, w);
  return s;
}

}  // namespace

TEST_CASE("add-one on a b a b") {
  const auto m = train_bigram(kAbab, {Smoothing::add_k, 1.0, 0.75, true});
  CHECK(m.vocab_size() == 3);  // a, b, <unk>
  CHECK(m.prob("a", "b") == 3.0 / 5.0);
  CHECK(m.prob("a", "a") == 1.0 / 5.0);
  CHECK(m.prob("b", "a") == 2.0 / 4.0);
  CHECK(m.prob("b", "b") == 1.0 / 4.0);
  CHECK(m.prob("<s>", "a") == 2.0 / 4.0);
  CHECK(m.prob("zzz", "a") == 1.0 / 3.0);
  CHECK(m.prob("a", "zzz") == 1.0 / 5.0);
}

TEST_CASE("add-k matches hand counts on a random corpus") {
  const auto corpus = synthetic_sentences(12, 80);
  const auto m = train_bigram(corpus, {Smoothing::add_k, 0.5, 0.75, false});
  std::vector<std::vector<std::string>> split;
  for (const auto& s : corpus) split.push_back(split_words(s));
  const oracle::BigramCounts c(split);
  const double V = static_cast<double>(c.types.size() + 1);
  for (const auto& [key, n] : c.pair) {
    const double ctx = c.context.at(key.first);
    CHECK(m.prob(key.first, key.second) == doctest::Approx((n + 0.5) / (ctx + 0.5 * V)).epsilon(1e-14));
  }
}

TEST_CASE("Kneser-Ney hand computation on a b a b") {
  const auto m = train_bigram(kAbab, {Smoothing::kneser_ney, 1.0, 0.75, true});
  CHECK(m.continuation_prob("a") == doctest::Approx(1.75 / 3.0).epsilon(1e-14));
  CHECK(m.continuation_prob("b") == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(m.continuation_prob("<unk>") == doctest::Approx(0.5 / 3.0).epsilon(1e-14));
  CHECK(m.prob("a", "b") == doctest::Approx(0.71875).epsilon(1e-14));
  CHECK(m.prob("nowhere", "b") == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("Kneser-Ney distributions sum to one for every context") {
  const auto m = train_bigram(synthetic_sentences(5, 300), {});
  CHECK(std::abs(context_sum(m, "<s>") - 1.0) < 1e-9);
  CHECK(std::abs(context_sum(m, "unseen-context") - 1.0) < 1e-9);
  for (const auto& v : m.vocabulary()) CHECK(std::abs(context_sum(m, v) - 1.0) < 1e-9);
}

TEST_CASE("counting is independent of the worker count") {
  const auto corpus = synthetic_sentences(8, 500);
  const auto a = train_bigram(corpus, {}, 1);
  const auto b = train_bigram(corpus, {}, 4);
  CHECK(a.bigrams() == b.bigrams());
  CHECK(a.vocabulary() == b.vocabulary());
}

TEST_CASE("normalization folds case and edge punctuation") {
  const auto m = train_bigram(std::vector<std::string>{"The dog. the DOG!"}, {});
  CHECK(m.count("dog", "the") == 1);
  CHECK(m.count("the", "dog") == 2);
  CHECK(m.key("Dog,") == "dog");
  CHECK(m.key("cat") == "<unk>");
}

TEST_CASE("bigram surprisal and persistence") {
  const auto corpus = synthetic_sentences(9, 200);
  const auto m = train_bigram(corpus, {});
  const std::vector<std::string> words = {"The", "dog", "slept."};
  const auto s = bigram_surprisal(m, words);
  CHECK(s[0] == doctest::Approx(-std::log(m.prob("<s>", "The"))));
  CHECK(s[2] == doctest::Approx(-std::log(m.prob("dog", "slept."))));
  test_support::TempDir dir;
  save_bigram(m, dir.path());
  const auto back = load_bigram(dir.path());
  CHECK(back.bigrams() == m.bigrams());
  CHECK(bigram_surprisal(back, words) == s);
  CHECK_THROWS_AS(bigram_surprisal(m, std::vector<std::string>{}), DataError);
}

TEST_CASE("invalid smoothing settings") {
  CHECK_THROWS_AS(train_bigram(kAbab, {Smoothing::add_k, 0.0, 0.75, true}), ConfigError);
  CHECK_THROWS_AS(train_bigram(kAbab, {Smoothing::kneser_ney, 1.0, 1.5, true}), ConfigError);
  CHECK_THROWS_AS(parse_smoothing("witten_bell"), ConfigError);
  CHECK_THROWS_AS(train_bigram(std::vector<std::string>{"", "  "}, {}), DataError);
}
