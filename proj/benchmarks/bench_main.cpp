#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "lenspsych/lens.hpp"
#include "lenspsych/model.hpp"
#include "lenspsych/ngram.hpp"
#include "lenspsych/psychofit.hpp"
#include "lenspsych/synthetic.hpp"
#include "lenspsych/tokenizer.hpp"

using namespace lenspsych;

namespace {

std::vector<TokenId> ids(std::size_t n, int vocab) {
  std::vector<TokenId> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<TokenId>((i * 37 + 11) % vocab);
  return out;
}

void BM_forward_capture(benchmark::State& state) {
  ModelConfig c;
  c.n_layers = static_cast<int>(state.range(0));
  const auto m = make_toy_bundle(1, c);
  const auto seq = ids(64, c.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(forward_capture(m, seq));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_forward_capture)->Arg(2)->Arg(4)->Arg(8);

void BM_logit_lens(benchmark::State& state) {
  const auto m = make_toy_bundle(1, {});
  const auto rs = forward_capture(m, ids(32, m.config.vocab_size));
  int pos = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(logit_lens(m, rs.state(2, pos)));
    pos = (pos + 1) % 32;
  }
}
BENCHMARK(BM_logit_lens);

void BM_ols_fit(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  std::vector<double> y(n);
  for (auto& v : y) v = z(rng);
  DesignMatrix d(y);
  d.add_intercept();
  for (int j = 0; j < 10; ++j) {
    std::vector<double> col(n);
    for (auto& v : col) v = z(rng);
    d.add_column("x" + std::to_string(j), std::move(col));
  }
  for (auto _ : state) benchmark::DoNotOptimize(ols_fit(d));
}
BENCHMARK(BM_ols_fit)->Arg(1000)->Arg(10000);

void BM_train_bigram(benchmark::State& state) {
  const auto corpus = synthetic_sentences(5, 2000);
  for (auto _ : state) benchmark::DoNotOptimize(train_bigram(corpus, {}, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_train_bigram)->Arg(1)->Arg(4);

void BM_bpe_encode(benchmark::State& state) {
  const auto tok = learn_bpe(synthetic_sentences(100, 300), 120);
  const auto text = synthetic_sentences(9, 1).front();
  for (auto _ : state) benchmark::DoNotOptimize(tok.encode(text));
}
BENCHMARK(BM_bpe_encode);

}  // namespace

BENCHMARK_MAIN();
