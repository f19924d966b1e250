#include <doctest.h>

#include <filesystem>
#include <vector>

#include "lenspsych/errors.hpp"
#include "lenspsych/model.hpp"
#include "support/oracle.hpp"
#include "support/temp_dir.hpp"

using namespace lenspsych;

namespace {

std::vector<TokenId> some_ids(std::size_t n, int vocab) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<TokenId>((i * 37 + 11) % vocab));
  return ids;
}

}  // namespace

TEST_CASE("config validation rejects bad shapes") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), DataError);
  c = {};
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), DataError);
}

TEST_CASE("forward pass matches a double-precision reference") {
  const auto m = make_toy_bundle(7, {});
  const auto ids = some_ids(40, 256);
  const auto rs = forward_capture(m, ids);
  const auto ref = oracle::forward(m, ids);
  double max_state = 0.0, max_logit = 0.0;
  for (int l = 1; l <= m.config.n_layers; ++l)
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const auto s = rs.state(l, static_cast<int>(t));
      for (std::size_t i = 0; i < s.size(); ++i)
        max_state = std::max(max_state, std::abs(s[i] - ref.states[l - 1][t][i]));
    }
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t v = 0; v < 256; ++v)
      max_logit = std::max(max_logit, std::abs(rs.final_logits()(t, v) - ref.logits[t][v]));
  CHECK(max_state < 1e-3);
  CHECK(max_logit < 1e-3);
}

TEST_CASE("forward_logits agrees with forward_capture") {
  const auto m = make_toy_bundle(3, {});
  const auto ids = some_ids(25, 256);
  CHECK(forward_logits(m, ids) == forward_capture(m, ids).final_logits());
}

TEST_CASE("attention is causal") {
  const auto m = make_toy_bundle(7, {});
  auto ids = some_ids(20, 256);
  const auto a = forward_capture(m, ids);
  ids.back() = (ids.back() + 1) % 256;
  const auto b = forward_capture(m, ids);
  for (int t = 0; t + 1 < 20; ++t)
    for (int l = 1; l <= m.config.n_layers; ++l) {
      const auto x = a.state(l, t), y = b.state(l, t);
      CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
}

TEST_CASE("sequences longer than max_positions are rejected") {
  ModelConfig c;
  c.max_positions = 8;
  const auto m = make_toy_bundle(1, c);
  CHECK_THROWS_AS(forward_capture(m, some_ids(9, 256)), DataError);
  CHECK_THROWS_AS(forward_capture(m, std::vector<TokenId>{300}), DataError);
}

TEST_CASE("toy bundles are deterministic and round-trip through disk") {
  const auto a = make_toy_bundle(11, {});
  CHECK(a == make_toy_bundle(11, {}));
  CHECK_FALSE(a == make_toy_bundle(12, {}));
  test_support::TempDir dir;
  save_bundle(a, dir.path() / "b");
  CHECK(load_bundle(dir.path() / "b") == a);
}

TEST_CASE("tied bundles store one matrix") {
  ModelConfig c;
  c.tied_unembedding = true;
  const auto a = make_toy_bundle(5, c);
  test_support::TempDir dir;
  save_bundle(a, dir.path());
  const auto b = load_bundle(dir.path());
  CHECK(b == a);
  CHECK(b.unembedding == b.token_embedding.transposed());
}

TEST_CASE("validation names the broken tensor") {
  auto m = make_toy_bundle(2, {});
  m.blocks[1].mlp_in(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    validate_bundle(m);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
  m = make_toy_bundle(2, {});
  m.final_norm.gain.pop_back();
  CHECK_THROWS_AS(validate_bundle(m), DataError);
}

TEST_CASE("corrupted tensor blobs are rejected") {
  test_support::TempDir dir;
  save_bundle(make_toy_bundle(4, {}), dir.path());
  std::filesystem::resize_file(dir.path() / "tensors.bin", 100);
  CHECK_THROWS_AS(load_bundle(dir.path()), DataError);
}
