#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "lenspsych/errors.hpp"
#include "lenspsych/lens.hpp"
#include "lenspsych/synthetic.hpp"
#include "support/oracle.hpp"
#include "support/temp_dir.hpp"
#include "tensor_store.hpp"

using namespace lenspsych;

namespace {

std::vector<TokenId> random_ids(std::uint64_t seed, std::size_t n, int vocab) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng() % static_cast<std::uint64_t>(vocab));
  return ids;
}

double logsumexp(const std::vector<double>& lp) {
  const double mx = *std::max_element(lp.begin(), lp.end());
  double s = 0.0;
  for (double v : lp) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace

TEST_CASE("log_softmax is stable for extreme logits") {
  const std::vector<float> z = {1000.0f, 0.0f, -1000.0f};
  const auto lp = log_softmax(z);
  CHECK(lp[0] == doctest::Approx(0.0));
  CHECK(std::isfinite(lp[2]));
  CHECK(std::abs(logsumexp(lp)) < 1e-12);
}

TEST_CASE("logit lens at the last layer reproduces the model output") {
  const auto m = make_toy_bundle(7, {});
  const auto ids = random_ids(1, 64, 256);
  const auto rs = forward_capture(m, ids);
  for (int t = 0; t < 64; ++t) {
    const auto lens = logit_lens(m, rs.state(m.config.n_layers, t));
    const auto own = log_softmax(rs.final_logits().row(t));
    for (std::size_t v = 0; v < lens.size(); ++v) REQUIRE(std::abs(lens[v] - own[v]) < 1e-4);
  }
}

TEST_CASE("logit lens matches the double-precision oracle at every layer") {
  const auto m = make_toy_bundle(9, {});
  const auto ids = random_ids(2, 30, 256);
  const auto rs = forward_capture(m, ids);
  for (int l = 1; l <= m.config.n_layers; ++l)
    for (int t = 0; t < 30; t += 7) {
      const auto h = rs.state(l, t);
      const auto lib = logit_lens(m, h);
      const auto ref = oracle::logit_lens(m, oracle::Vec(h.begin(), h.end()));
      for (std::size_t v = 0; v < lib.size(); ++v) REQUIRE(std::abs(lib[v] - ref[v]) < 1e-4);
    }
}

TEST_CASE("every lens distribution is normalized") {
  const auto m = make_toy_bundle(7, {});
  const auto ids = random_ids(3, 50, 256);
  const auto rs = forward_capture(m, ids);
  std::mt19937_64 rng(5);
  AffineParams p = AffineParams::identity(m.config.d_model);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (auto& w : p.weight) w += noise(rng);
  for (auto& b : p.bias) b += noise(rng);
  const auto tr = p.to_translator(1);
  for (int l = 1; l <= m.config.n_layers; ++l)
    for (int t = 0; t < 50; ++t) {
      CHECK(std::abs(logsumexp(logit_lens(m, rs.state(l, t)))) < 1e-6);
      CHECK(std::abs(logsumexp(tuned_lens(m, tr, rs.state(l, t)))) < 1e-6);
    }
}

TEST_CASE("non-finite hidden states are rejected") {
  const auto m = make_toy_bundle(7, {});
  std::vector<float> h(32, 0.0f);
  h[3] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(logit_lens(m, h), DataError);
}

TEST_CASE("identity translators make the tuned lens equal the logit lens") {
  const auto m = make_toy_bundle(7, {});
  const auto ids = random_ids(4, 20, 256);
  const auto set = TranslatorSet::identity(m.config.n_layers, m.config.d_model);
  const auto a = token_surprisals(m, LensKind::logit, nullptr, ids);
  const auto b = token_surprisals(m, LensKind::tuned, &set, ids);
  CHECK(a.tokens.at(LensKind::logit) == b.tokens.at(LensKind::tuned));
}

TEST_CASE("tuned lens without translators is a configuration error") {
  const auto m = make_toy_bundle(7, {});
  CHECK_THROWS_AS(token_surprisals(m, LensKind::tuned, nullptr, random_ids(1, 5, 256)), ConfigError);
}

TEST_CASE("sliding windows score each target with the context of its first covering window") {
  ModelConfig c;
  c.max_positions = 16;
  const auto m = make_toy_bundle(21, c);
  const auto ids = random_ids(6, 45, 256);
  const WindowOptions w{12, 5};
  const auto table = token_surprisals(m, LensKind::logit, nullptr, ids, w);
  const auto& last = table.tokens.at(LensKind::logit)[c.n_layers - 1];
  REQUIRE(last.size() == ids.size() - 1);
  for (std::size_t target = 1; target < ids.size(); ++target) {
    std::size_t start = 0;
    while (start + 12 <= target) start += 5;
    const std::vector<TokenId> ctx(ids.begin() + static_cast<long>(start), ids.begin() + static_cast<long>(target));
    const auto ref = oracle::forward(m, ctx);
    const auto lp = oracle::log_softmax(ref.logits.back());
    CHECK(last[target - 1] == doctest::Approx(-lp[ids[target]]).epsilon(1e-4));
  }
}

TEST_CASE("a window covering the whole sequence equals unwindowed scoring") {
  const auto m = make_toy_bundle(7, {});
  const auto ids = random_ids(8, 40, 256);
  CHECK(token_surprisals(m, LensKind::logit, nullptr, ids).tokens ==
        token_surprisals(m, LensKind::logit, nullptr, ids, {64, 32}).tokens);
}

TEST_CASE("stride must be smaller than the window") {
  const auto m = make_toy_bundle(7, {});
  CHECK_THROWS_AS(token_surprisals(m, LensKind::logit, nullptr, random_ids(1, 10, 256), {8, 8}), ConfigError);
}

TEST_CASE("word surprisal sums token surprisals under both token shifts") {
  SurprisalTable t;
  t.n_layers = 1;
  t.tokens[LensKind::logit] = {{1.0, 2.0, 4.0, 8.0}};
  WordAlignment a;
  a.words = {"ab", "c"};
  a.spans = {{0, 2}, {2, 3}};
  word_surprisals(t, a, 0);
  CHECK(t.words[LensKind::logit][0] == std::vector<double>{3.0, 4.0});
  word_surprisals(t, a, 1);
  CHECK(t.words[LensKind::logit][0] == std::vector<double>{6.0, 8.0});
  CHECK_THROWS_AS(word_surprisals(t, a, -1), DataError);
}

TEST_CASE("surprisal TSV offsets word indices") {
  SurprisalTable t;
  t.seq_id = "s1";
  t.n_layers = 1;
  t.first_word_index = 5;
  t.tokens[LensKind::logit] = {{0.5}};
  t.words[LensKind::logit] = {{0.5}};
  std::ostringstream out;
  write_surprisal_tsv(out, t);
  CHECK(out.str() == std::string(kSurprisalTsvHeader) +
                         "\ns1\t1\tlogit\ttoken\t0\t0.5\ns1\t1\tlogit\tword\t5\t0.5\n");
}

TEST_CASE("translators round-trip and residual parameterisations are folded on load") {
  const auto m = make_toy_bundle(7, {});
  const int d = m.config.d_model;
  std::vector<Translator> ts;
  for (int l = 1; l < m.config.n_layers; ++l) {
    auto t = Translator::identity(l, d);
    t.weight(0, 1) = 0.25f * static_cast<float>(l);
    t.bias[2] = -0.5f;
    ts.push_back(t);
  }
  TranslatorSet set(m.config.n_layers, d, ts);
  set.direction = KlDirection::reverse;
  test_support::TempDir dir;
  save_translators(set, dir.path());
  const auto back = load_translators(dir.path(), m.config);
  CHECK(back.direction == KlDirection::reverse);
  for (int l = 1; l < m.config.n_layers; ++l) CHECK(back.at(l).weight == set.at(l).weight);

  // Residual form: stored W' = W - I.
  auto contents = detail::read_tensor_directory(dir.path());
  contents.header["identity_folded"] = false;
  for (auto& [name, tensor] : contents.tensors)
    if (name.ends_with(".W"))
      for (int i = 0; i < d; ++i) tensor.values[static_cast<std::size_t>(i * d + i)] -= 1.0f;
  detail::write_tensor_directory(dir.path() / "residual", contents);
  const auto folded = load_translators(dir.path() / "residual", m.config);
  for (int l = 1; l < m.config.n_layers; ++l) CHECK(folded.at(l).weight == set.at(l).weight);

  ModelConfig other;
  other.d_model = 16;
  other.n_heads = 2;
  CHECK_THROWS_AS(load_translators(dir.path(), other), DataError);
}

TEST_CASE("KL gradient matches central finite differences") {
  ModelConfig c;
  c.max_positions = 32;
  const auto m = make_toy_bundle(7, c);
  std::vector<std::vector<TokenId>> corpus = {random_ids(10, 20, 256), random_ids(11, 20, 256)};
  auto data = collect_training_data(m, corpus);
  for (auto dir : {KlDirection::forward, KlDirection::reverse}) {
    KlObjective obj(m, data.hidden[1], data.final_log_probs, dir);
    auto p = AffineParams::identity(c.d_model);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (auto& w : p.weight) w += noise(rng);
    for (auto& b : p.bias) b += noise(rng);
    std::vector<std::size_t> subset(obj.size());
    std::iota(subset.begin(), subset.end(), 0);
    AffineParams g;
    obj.value_and_gradient(p, subset, g);
    const double h = 1e-5;
    for (int k : {0, 5, 17, 31}) {
      auto plus = p, minus = p;
      plus.bias[k] += h;
      minus.bias[k] -= h;
      const double fd = (obj.value(plus, subset) - obj.value(minus, subset)) / (2 * h);
      CHECK(std::abs(g.bias[k] - fd) <= 1e-3 * std::max(std::abs(fd), 1e-6));
    }
    for (std::size_t k : {0u, 100u, 1000u}) {
      auto plus = p, minus = p;
      plus.weight[k] += h;
      minus.weight[k] -= h;
      const double fd = (obj.value(plus, subset) - obj.value(minus, subset)) / (2 * h);
      CHECK(std::abs(g.weight[k] - fd) <= 1e-3 * std::max(std::abs(fd), 1e-6));
    }
  }
}

TEST_CASE("translator training lowers validation KL at every non-final layer") {
  const auto m = make_toy_bundle(7, {});
  std::vector<std::vector<TokenId>> corpus;
  for (const auto& s : synthetic_sentences(1, 60)) {
    std::vector<TokenId> ids = {0};
    for (unsigned char ch : s) ids.push_back(ch);
    corpus.push_back(ids);
  }
  TrainingOptions o;
  o.steps = 60;
  o.batch_size = 32;
  const auto r = train_translators(m, corpus, o);
  REQUIRE(r.final_validation_kl.size() == static_cast<std::size_t>(m.config.n_layers - 1));
  for (std::size_t l = 0; l < r.final_validation_kl.size(); ++l)
    CHECK(r.final_validation_kl[l] < r.initial_validation_kl[l]);
  CHECK(train_translators(m, corpus, o).final_validation_kl == r.final_validation_kl);

  o.batch_size = 100000;
  CHECK_THROWS_AS(train_translators(m, corpus, o), DataError);
  o.batch_size = 8;
  o.learning_rate = 0.0;
  CHECK_THROWS_AS(train_translators(m, corpus, o), ConfigError);
}
