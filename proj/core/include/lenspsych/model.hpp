#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lenspsych {

using TokenId = std::int32_t;

struct ModelConfig {
  int n_layers = 4;
  int d_model = 32;
  int n_heads = 4;
  int vocab_size = 256;
  int max_positions = 128;
  int d_mlp = 0;  // 0 means 4 * d_model
  float ln_epsilon = 1e-5f;
  bool tied_unembedding = false;

  int mlp_width() const { return d_mlp > 0 ? d_mlp : 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }

  /// Throws DataError when an invariant is violated.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Dense row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

struct LayerNormParams {
  std::vector<float> gain;
  std::vector<float> bias;

  bool operator==(const LayerNormParams&) const = default;
};

/// Weights of one pre-layernorm GPT-2 block. Projections are stored
/// input-major (x * W), the Conv1D convention of GPT-2 checkpoints.
struct BlockWeights {
  LayerNormParams ln_attn;
  Matrix attn_qkv;  // d x 3d
  std::vector<float> attn_qkv_bias;
  Matrix attn_out;  // d x d
  std::vector<float> attn_out_bias;
  LayerNormParams ln_mlp;
  Matrix mlp_in;  // d x d_mlp
  std::vector<float> mlp_in_bias;
  Matrix mlp_out;  // d_mlp x d
  std::vector<float> mlp_out_bias;

  bool operator==(const BlockWeights&) const = default;
};

inline constexpr std::string_view kArchGpt2PreLn = "gpt2-preln";

struct ModelBundle {
  ModelConfig config;
  std::string architecture{kArchGpt2PreLn};
  Matrix token_embedding;     // |V| x d
  Matrix position_embedding;  // max_positions x d
  std::vector<BlockWeights> blocks;
  LayerNormParams final_norm;
  Matrix unembedding;  // d x |V|  (W_U)

  bool operator==(const ModelBundle&) const = default;
};

/// Residual-stream vectors after every block for one sequence, plus the
/// model's own output logits. Layers are addressed 1..L; the embedding
/// output (layer 0) is not kept.
class ResidualStream {
 public:
  ResidualStream() = default;
  ResidualStream(int n_layers, int n_positions, int d_model, int vocab_size);

  int n_layers() const { return n_layers_; }
  int n_positions() const { return n_positions_; }
  int d_model() const { return d_model_; }

  std::span<const float> state(int layer, int position) const;
  std::span<float> state(int layer, int position);

  const Matrix& final_logits() const { return final_logits_; }
  Matrix& final_logits() { return final_logits_; }

  std::span<const float> raw_states() const { return states_; }

 private:
  int n_layers_ = 0;
  int n_positions_ = 0;
  int d_model_ = 0;
  std::vector<float> states_;
  Matrix final_logits_;
};

/// Structural and numerical validation: shapes against config, finite weights,
/// tied unembedding consistency. Throws DataError naming the offending tensor.
void validate_bundle(const ModelBundle& model);

ModelBundle load_bundle(const std::filesystem::path& dir);
void save_bundle(const ModelBundle& model, const std::filesystem::path& dir);

/// Deterministic pseudo-random weights scaled so that a randomly initialised
/// model still produces peaked, layer-dependent next-token distributions.
ModelBundle make_toy_bundle(std::uint64_t seed, const ModelConfig& config);

ResidualStream forward_capture(const ModelBundle& model, std::span<const TokenId> ids);

/// Same arithmetic as forward_capture without keeping intermediate states.
Matrix forward_logits(const ModelBundle& model, std::span<const TokenId> ids);

void layer_norm(std::span<const float> x, const LayerNormParams& params, float epsilon,
                std::span<float> out);

/// LayerNorm with the final-layer parameters followed by W_U.
void project_to_vocab(const ModelBundle& model, std::span<const float> hidden,
                      std::span<float> logits);

/// Per-layer tensor names used by the bundle manifest.
std::vector<std::string> bundle_tensor_names(const ModelConfig& config);

}  // namespace lenspsych
