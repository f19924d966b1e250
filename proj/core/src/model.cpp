#include "lenspsych/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "lenspsych/errors.hpp"
#include "random.hpp"
#include "tensor_store.hpp"

namespace lenspsych {

namespace fs = std::filesystem;
using detail::StoredTensor;
using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw DataError("invalid model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1) fail("d_model must be positive");
  if (n_heads < 1) fail("n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (max_positions < 1) fail("max_positions must be positive");
  if (d_mlp < 0) fail("d_mlp must be non-negative");
  if (!(ln_epsilon > 0.0f) || !std::isfinite(ln_epsilon)) fail("ln_epsilon must be positive");
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

ResidualStream::ResidualStream(int n_layers, int n_positions, int d_model, int vocab_size)
    : n_layers_(n_layers),
      n_positions_(n_positions),
      d_model_(d_model),
      states_(static_cast<std::size_t>(n_layers) * n_positions * d_model),
      final_logits_(static_cast<std::size_t>(n_positions), static_cast<std::size_t>(vocab_size)) {}

std::span<const float> ResidualStream::state(int layer, int position) const {
  const auto off = (static_cast<std::size_t>(layer - 1) * n_positions_ + position) * d_model_;
  return {states_.data() + off, static_cast<std::size_t>(d_model_)};
}

std::span<float> ResidualStream::state(int layer, int position) {
  const auto off = (static_cast<std::size_t>(layer - 1) * n_positions_ + position) * d_model_;
  return {states_.data() + off, static_cast<std::size_t>(d_model_)};
}

// ---------------------------------------------------------------------------
// Tensor naming

namespace {

std::string block_name(int i, const char* suffix) {
  return "h." + std::to_string(i) + "." + suffix;
}

struct Expected {
  std::string name;
  std::vector<std::int64_t> shape;
};

std::vector<Expected> expected_tensors(const ModelConfig& c) {
  const std::int64_t d = c.d_model, v = c.vocab_size, p = c.max_positions, m = c.mlp_width();
  std::vector<Expected> out = {{"wte.weight", {v, d}}, {"wpe.weight", {p, d}}};
  for (int i = 0; i < c.n_layers; ++i) {
    out.push_back({block_name(i, "ln_1.weight"), {d}});
    out.push_back({block_name(i, "ln_1.bias"), {d}});
    out.push_back({block_name(i, "attn.c_attn.weight"), {d, 3 * d}});
    out.push_back({block_name(i, "attn.c_attn.bias"), {3 * d}});
    out.push_back({block_name(i, "attn.c_proj.weight"), {d, d}});
    out.push_back({block_name(i, "attn.c_proj.bias"), {d}});
    out.push_back({block_name(i, "ln_2.weight"), {d}});
    out.push_back({block_name(i, "ln_2.bias"), {d}});
    out.push_back({block_name(i, "mlp.c_fc.weight"), {d, m}});
    out.push_back({block_name(i, "mlp.c_fc.bias"), {m}});
    out.push_back({block_name(i, "mlp.c_proj.weight"), {m, d}});
    out.push_back({block_name(i, "mlp.c_proj.bias"), {d}});
  }
  out.push_back({"ln_f.weight", {d}});
  out.push_back({"ln_f.bias", {d}});
  out.push_back({"unembedding.weight", {d, v}});
  return out;
}

void check_finite(const std::string& name, std::span<const float> values) {
  for (float x : values)
    if (!std::isfinite(x)) throw DataError("non-finite value in tensor " + name);
}

void check_matrix(const std::string& name, const Matrix& m, std::size_t rows, std::size_t cols) {
  if (m.rows() != rows || m.cols() != cols)
    throw DataError("shape mismatch for tensor " + name + ": expected [" + std::to_string(rows) +
                    "," + std::to_string(cols) + "], got [" + std::to_string(m.rows()) + "," +
                    std::to_string(m.cols()) + "]");
  check_finite(name, m.values());
}

void check_vector(const std::string& name, const std::vector<float>& v, std::size_t n) {
  if (v.size() != n)
    throw DataError("shape mismatch for tensor " + name + ": expected [" + std::to_string(n) +
                    "], got [" + std::to_string(v.size()) + "]");
  check_finite(name, v);
}

Matrix to_matrix(const StoredTensor& t) {
  Matrix m(static_cast<std::size_t>(t.shape[0]), static_cast<std::size_t>(t.shape[1]));
  std::copy(t.values.begin(), t.values.end(), m.values().begin());
  return m;
}

StoredTensor from_matrix(const Matrix& m) {
  return {{static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())},
          std::vector<float>(m.values().begin(), m.values().end())};
}

StoredTensor from_vector(const std::vector<float>& v) {
  return {{static_cast<std::int64_t>(v.size())}, v};
}

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},         {"d_model", c.d_model},
          {"n_heads", c.n_heads},           {"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions}, {"d_mlp", c.mlp_width()},
          {"ln_epsilon", c.ln_epsilon},     {"tied_unembedding", c.tied_unembedding}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.d_mlp = j.value("d_mlp", 0);
    if (c.d_mlp == 4 * c.d_model) c.d_mlp = 0;  // canonical form of the default width
    c.ln_epsilon = j.value("ln_epsilon", 1e-5f);
    c.tied_unembedding = j.value("tied_unembedding", false);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

std::vector<std::string> bundle_tensor_names(const ModelConfig& config) {
  std::vector<std::string> names;
  for (auto& e : expected_tensors(config)) names.push_back(e.name);
  return names;
}

void validate_bundle(const ModelBundle& model) {
  const auto& c = model.config;
  c.validate();
  if (model.architecture != kArchGpt2PreLn)
    throw DataError("unsupported architecture: " + model.architecture);
  const std::size_t d = c.d_model, v = c.vocab_size, p = c.max_positions, m = c.mlp_width();
  check_matrix("wte.weight", model.token_embedding, v, d);
  check_matrix("wpe.weight", model.position_embedding, p, d);
  if (model.blocks.size() != static_cast<std::size_t>(c.n_layers))
    throw DataError("bundle has " + std::to_string(model.blocks.size()) + " blocks, config says " +
                    std::to_string(c.n_layers));
  for (int i = 0; i < c.n_layers; ++i) {
    const auto& b = model.blocks[i];
    check_vector(block_name(i, "ln_1.weight"), b.ln_attn.gain, d);
    check_vector(block_name(i, "ln_1.bias"), b.ln_attn.bias, d);
    check_matrix(block_name(i, "attn.c_attn.weight"), b.attn_qkv, d, 3 * d);
    check_vector(block_name(i, "attn.c_attn.bias"), b.attn_qkv_bias, 3 * d);
    check_matrix(block_name(i, "attn.c_proj.weight"), b.attn_out, d, d);
    check_vector(block_name(i, "attn.c_proj.bias"), b.attn_out_bias, d);
    check_vector(block_name(i, "ln_2.weight"), b.ln_mlp.gain, d);
    check_vector(block_name(i, "ln_2.bias"), b.ln_mlp.bias, d);
    check_matrix(block_name(i, "mlp.c_fc.weight"), b.mlp_in, d, m);
    check_vector(block_name(i, "mlp.c_fc.bias"), b.mlp_in_bias, m);
    check_matrix(block_name(i, "mlp.c_proj.weight"), b.mlp_out, m, d);
    check_vector(block_name(i, "mlp.c_proj.bias"), b.mlp_out_bias, d);
  }
  check_vector("ln_f.weight", model.final_norm.gain, d);
  check_vector("ln_f.bias", model.final_norm.bias, d);
  check_matrix("unembedding.weight", model.unembedding, d, v);
  if (c.tied_unembedding) {
    for (std::size_t r = 0; r < v; ++r)
      for (std::size_t k = 0; k < d; ++k)
        if (model.unembedding(k, r) != model.token_embedding(r, k))
          throw DataError("unembedding.weight is not the transpose of wte.weight in a tied bundle");
  }
}

ModelBundle load_bundle(const fs::path& dir) {
  auto contents = detail::read_tensor_directory(dir);
  const auto& header = contents.header;
  if (!header.contains("config")) throw DataError("manifest has no config: " + dir.string());

  ModelBundle model;
  model.config = config_from_json(header["config"]);
  model.architecture = header.value("architecture", std::string(kArchGpt2PreLn));
  if (model.architecture != kArchGpt2PreLn)
    throw DataError("unsupported architecture: " + model.architecture);

  auto& tensors = contents.tensors;
  const bool tied = model.config.tied_unembedding;
  for (const auto& e : expected_tensors(model.config)) {
    auto it = tensors.find(e.name);
    if (it == tensors.end()) {
      if (tied && e.name == "unembedding.weight") continue;
      throw DataError("missing tensor: " + e.name);
    }
    if (it->second.shape != e.shape)
      throw DataError("shape mismatch for tensor " + e.name + ": expected " +
                      detail::shape_string(e.shape) + ", got " +
                      detail::shape_string(it->second.shape));
    check_finite(e.name, it->second.values);
  }

  auto take_matrix = [&](const std::string& n) { return to_matrix(tensors.at(n)); };
  auto take_vector = [&](const std::string& n) { return tensors.at(n).values; };

  model.token_embedding = take_matrix("wte.weight");
  model.position_embedding = take_matrix("wpe.weight");
  for (int i = 0; i < model.config.n_layers; ++i) {
    BlockWeights b;
    b.ln_attn = {take_vector(block_name(i, "ln_1.weight")), take_vector(block_name(i, "ln_1.bias"))};
    b.attn_qkv = take_matrix(block_name(i, "attn.c_attn.weight"));
    b.attn_qkv_bias = take_vector(block_name(i, "attn.c_attn.bias"));
    b.attn_out = take_matrix(block_name(i, "attn.c_proj.weight"));
    b.attn_out_bias = take_vector(block_name(i, "attn.c_proj.bias"));
    b.ln_mlp = {take_vector(block_name(i, "ln_2.weight")), take_vector(block_name(i, "ln_2.bias"))};
    b.mlp_in = take_matrix(block_name(i, "mlp.c_fc.weight"));
    b.mlp_in_bias = take_vector(block_name(i, "mlp.c_fc.bias"));
    b.mlp_out = take_matrix(block_name(i, "mlp.c_proj.weight"));
    b.mlp_out_bias = take_vector(block_name(i, "mlp.c_proj.bias"));
    model.blocks.push_back(std::move(b));
  }
  model.final_norm = {take_vector("ln_f.weight"), take_vector("ln_f.bias")};
  if (tensors.contains("unembedding.weight"))
    model.unembedding = take_matrix("unembedding.weight");
  else
    model.unembedding = model.token_embedding.transposed();

  validate_bundle(model);
  return model;
}

void save_bundle(const ModelBundle& model, const fs::path& dir) {
  validate_bundle(model);
  detail::TensorDirectory out;
  out.header["format"] = "lenspsych.tensors";
  out.header["version"] = 1;
  out.header["kind"] = "model";
  out.header["architecture"] = model.architecture;
  out.header["config"] = config_to_json(model.config);

  auto& t = out.tensors;
  t["wte.weight"] = from_matrix(model.token_embedding);
  t["wpe.weight"] = from_matrix(model.position_embedding);
  for (int i = 0; i < model.config.n_layers; ++i) {
    const auto& b = model.blocks[i];
    t[block_name(i, "ln_1.weight")] = from_vector(b.ln_attn.gain);
    t[block_name(i, "ln_1.bias")] = from_vector(b.ln_attn.bias);
    t[block_name(i, "attn.c_attn.weight")] = from_matrix(b.attn_qkv);
    t[block_name(i, "attn.c_attn.bias")] = from_vector(b.attn_qkv_bias);
    t[block_name(i, "attn.c_proj.weight")] = from_matrix(b.attn_out);
    t[block_name(i, "attn.c_proj.bias")] = from_vector(b.attn_out_bias);
    t[block_name(i, "ln_2.weight")] = from_vector(b.ln_mlp.gain);
    t[block_name(i, "ln_2.bias")] = from_vector(b.ln_mlp.bias);
    t[block_name(i, "mlp.c_fc.weight")] = from_matrix(b.mlp_in);
    t[block_name(i, "mlp.c_fc.bias")] = from_vector(b.mlp_in_bias);
    t[block_name(i, "mlp.c_proj.weight")] = from_matrix(b.mlp_out);
    t[block_name(i, "mlp.c_proj.bias")] = from_vector(b.mlp_out_bias);
  }
  t["ln_f.weight"] = from_vector(model.final_norm.gain);
  t["ln_f.bias"] = from_vector(model.final_norm.bias);
  if (!model.config.tied_unembedding) t["unembedding.weight"] = from_matrix(model.unembedding);
  detail::write_tensor_directory(dir, out);
}

// ---------------------------------------------------------------------------
// Toy weights

namespace {

class NormalSource {
 public:
  explicit NormalSource(std::uint64_t seed) : rng_(seed) {}
  float operator()(double stddev) { return static_cast<float>(rng_.normal() * stddev); }

 private:
  detail::Rng rng_;
};

Matrix random_matrix(NormalSource& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (auto& x : m.values()) x = rng(stddev);
  return m;
}

std::vector<float> random_vector(NormalSource& rng, std::size_t n, double mean, double stddev) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(mean) + rng(stddev);
  return v;
}

}  // namespace

ModelBundle make_toy_bundle(std::uint64_t seed, const ModelConfig& config) {
  config.validate();
  NormalSource rng(seed);
  const std::size_t d = config.d_model, v = config.vocab_size, p = config.max_positions,
                    m = config.mlp_width();
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));

  ModelBundle model;
  model.config = config;
  model.token_embedding = random_matrix(rng, v, d, 1.0);
  model.position_embedding = random_matrix(rng, p, d, 0.5);
  for (int i = 0; i < config.n_layers; ++i) {
    BlockWeights b;
    b.ln_attn = {random_vector(rng, d, 1.0, 0.1), random_vector(rng, d, 0.0, 0.1)};
    b.attn_qkv = random_matrix(rng, d, 3 * d, 1.5 * in_scale);
    b.attn_qkv_bias = random_vector(rng, 3 * d, 0.0, 0.02);
    b.attn_out = random_matrix(rng, d, d, in_scale);
    b.attn_out_bias = random_vector(rng, d, 0.0, 0.02);
    b.ln_mlp = {random_vector(rng, d, 1.0, 0.1), random_vector(rng, d, 0.0, 0.1)};
    b.mlp_in = random_matrix(rng, d, m, in_scale);
    b.mlp_in_bias = random_vector(rng, m, 0.0, 0.02);
    b.mlp_out = random_matrix(rng, m, d, 2.0 / std::sqrt(static_cast<double>(m)));
    b.mlp_out_bias = random_vector(rng, d, 0.0, 0.02);
    model.blocks.push_back(std::move(b));
  }
  model.final_norm = {random_vector(rng, d, 1.0, 0.1), random_vector(rng, d, 0.0, 0.1)};
  if (config.tied_unembedding)
    model.unembedding = model.token_embedding.transposed();
  else
    model.unembedding = random_matrix(rng, d, v, 2.0 * in_scale);
  return model;
}

// ---------------------------------------------------------------------------
// Forward pass

void layer_norm(std::span<const float> x, const LayerNormParams& params, float epsilon,
                std::span<float> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<float>((x[i] - mean) * inv) * params.gain[i] + params.bias[i];
}

namespace {

// out = x * W + bias, W stored input-major.
void affine(std::span<const float> x, const Matrix& w, std::span<const float> bias,
            std::span<float> out) {
  std::copy(bias.begin(), bias.end(), out.begin());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float xi = x[i];
    const auto row = w.row(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += xi * row[j];
  }
}

float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

constexpr float kMaskValue = -1e9f;

void check_ids(const ModelBundle& model, std::span<const TokenId> ids) {
  if (ids.size() > static_cast<std::size_t>(model.config.max_positions))
    throw DataError("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_positions " +
                    std::to_string(model.config.max_positions));
  for (std::size_t t = 0; t < ids.size(); ++t)
    if (ids[t] < 0 || ids[t] >= model.config.vocab_size)
      throw DataError("token id " + std::to_string(ids[t]) + " at position " + std::to_string(t) +
                      " is out of range for vocabulary of " +
                      std::to_string(model.config.vocab_size));
}

void run_block(const ModelBundle& model, const BlockWeights& b, Matrix& x) {
  const auto& c = model.config;
  const std::size_t T = x.rows(), d = c.d_model, hd = c.head_dim(), m = c.mlp_width();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Matrix normed(T, d), qkv(T, 3 * d), heads(T, d), proj(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    layer_norm(x.row(t), b.ln_attn, c.ln_epsilon, normed.row(t));
    affine(normed.row(t), b.attn_qkv, b.attn_qkv_bias, qkv.row(t));
  }

  std::vector<float> scores(T);
  for (int h = 0; h < c.n_heads; ++h) {
    const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    for (std::size_t t = 0; t < T; ++t) {
      const auto q = qkv.row(t);
      float max_score = -std::numeric_limits<float>::infinity();
      for (std::size_t s = 0; s < T; ++s) {
        const auto k = qkv.row(s);
        float dot = 0.0f;
        for (std::size_t i = 0; i < hd; ++i) dot += q[qo + i] * k[ko + i];
        scores[s] = dot * scale + (s > t ? kMaskValue : 0.0f);
        max_score = std::max(max_score, scores[s]);
      }
      double total = 0.0;
      for (std::size_t s = 0; s < T; ++s) {
        scores[s] = std::exp(scores[s] - max_score);
        total += scores[s];
      }
      auto out = heads.row(t);
      for (std::size_t i = 0; i < hd; ++i) out[qo + i] = 0.0f;
      for (std::size_t s = 0; s < T; ++s) {
        const float w = static_cast<float>(scores[s] / total);
        const auto v = qkv.row(s);
        for (std::size_t i = 0; i < hd; ++i) out[qo + i] += w * v[vo + i];
      }
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    affine(heads.row(t), b.attn_out, b.attn_out_bias, proj.row(t));
    auto xr = x.row(t);
    for (std::size_t i = 0; i < d; ++i) xr[i] += proj(t, i);
  }

  std::vector<float> hidden(m), mlp(d);
  for (std::size_t t = 0; t < T; ++t) {
    layer_norm(x.row(t), b.ln_mlp, c.ln_epsilon, normed.row(t));
    affine(normed.row(t), b.mlp_in, b.mlp_in_bias, hidden);
    for (auto& v : hidden) v = gelu(v);
    affine(hidden, b.mlp_out, b.mlp_out_bias, mlp);
    auto xr = x.row(t);
    for (std::size_t i = 0; i < d; ++i) xr[i] += mlp[i];
  }
}

Matrix forward_impl(const ModelBundle& model, std::span<const TokenId> ids,
                    ResidualStream* capture) {
  check_ids(model, ids);
  const auto& c = model.config;
  const std::size_t T = ids.size(), d = c.d_model;

  Matrix x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto tok = model.token_embedding.row(static_cast<std::size_t>(ids[t]));
    const auto pos = model.position_embedding.row(t);
    auto xr = x.row(t);
    for (std::size_t i = 0; i < d; ++i) xr[i] = tok[i] + pos[i];
  }

  for (int l = 0; l < c.n_layers; ++l) {
    run_block(model, model.blocks[l], x);
    if (capture) {
      for (std::size_t t = 0; t < T; ++t) {
        const auto src = x.row(t);
        std::copy(src.begin(), src.end(), capture->state(l + 1, static_cast<int>(t)).begin());
      }
    }
  }

  Matrix logits(T, static_cast<std::size_t>(c.vocab_size));
  for (std::size_t t = 0; t < T; ++t) project_to_vocab(model, x.row(t), logits.row(t));
  return logits;
}

}  // namespace

void project_to_vocab(const ModelBundle& model, std::span<const float> hidden,
                      std::span<float> logits) {
  const std::size_t d = model.config.d_model;
  std::vector<float> normed(d);
  layer_norm(hidden, model.final_norm, model.config.ln_epsilon, normed);
  std::fill(logits.begin(), logits.end(), 0.0f);
  for (std::size_t i = 0; i < d; ++i) {
    const float ni = normed[i];
    const auto row = model.unembedding.row(i);
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] += ni * row[j];
  }
}

ResidualStream forward_capture(const ModelBundle& model, std::span<const TokenId> ids) {
  ResidualStream stream(model.config.n_layers, static_cast<int>(ids.size()), model.config.d_model,
                        model.config.vocab_size);
  stream.final_logits() = forward_impl(model, ids, &stream);
  return stream;
}

Matrix forward_logits(const ModelBundle& model, std::span<const TokenId> ids) {
  return forward_impl(model, ids, nullptr);
}

}  // namespace lenspsych
