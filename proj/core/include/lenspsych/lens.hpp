#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lenspsych/model.hpp"
#include "lenspsych/tokenizer.hpp"

namespace lenspsych {

enum class LensKind { logit, tuned };

std::string_view to_string(LensKind kind);
LensKind parse_lens_kind(std::string_view name);

/// Affine map applied to h before the logit lens: h * W + b. The identity
/// term of residual parameterisations is already folded into W.
struct Translator {
  int layer = 0;
  Matrix weight;  // d x d
  std::vector<float> bias;

  static Translator identity(int layer, int d_model);
};

enum class KlDirection {
  forward,  // KL(final || lens)
  reverse,  // KL(lens || final)
};

std::string_view to_string(KlDirection dir);
KlDirection parse_kl_direction(std::string_view name);

/// Translators for layers 1..L-1. The final layer always uses the identity.
class TranslatorSet {
 public:
  TranslatorSet() = default;
  TranslatorSet(int n_layers, int d_model, std::vector<Translator> translators);

  /// Identity translators everywhere; tuned lens then equals logit lens.
  static TranslatorSet identity(int n_layers, int d_model);

  int n_layers() const { return n_layers_; }
  int d_model() const { return d_model_; }
  const Translator& at(int layer) const;
  const std::vector<Translator>& translators() const { return translators_; }

  KlDirection direction = KlDirection::forward;

 private:
  int n_layers_ = 0;
  int d_model_ = 0;
  std::vector<Translator> translators_;
  Translator final_identity_;
};

/// Stored in the bundle tensor format as translator.{l}.W / translator.{l}.b.
void save_translators(const TranslatorSet& set, const std::filesystem::path& dir);

/// When the manifest declares `identity_folded: false` (residual
/// parameterisation h W' + h + b), the identity is added to W on load.
TranslatorSet load_translators(const std::filesystem::path& dir, const ModelConfig& config);

/// Natural-log softmax with max subtraction, accumulated in double.
std::vector<double> log_softmax(std::span<const float> logits);

/// log softmax(LayerNorm_final(h) W_U). Throws DataError on non-finite input.
std::vector<double> logit_lens(const ModelBundle& model, std::span<const float> hidden);

/// logit_lens(h W + b).
std::vector<double> tuned_lens(const ModelBundle& model, const Translator& translator,
                               std::span<const float> hidden);

/// Per-token and per-word surprisal (nats) for one sequence.
/// tokens[lens][layer-1][t] is -log p(ids[t+1] | ids[..t]).
struct SurprisalTable {
  std::string seq_id;
  int n_layers = 0;
  int first_word_index = 0;  // corpus word_index of word 0
  std::map<LensKind, std::vector<std::vector<double>>> tokens;
  std::map<LensKind, std::vector<std::vector<double>>> words;
};

struct WindowOptions {
  int window = 0;  // 0 means the model's max_positions
  int stride = 0;  // 0 means window / 2
};

/// Scores every position with every layer's lens. Sequences longer than the
/// window are scored with overlapping windows; after the first window only
/// the not-yet-scored tail of each window is kept.
SurprisalTable token_surprisals(const ModelBundle& model, LensKind lens,
                                const TranslatorSet* translators, std::span<const TokenId> ids,
                                WindowOptions window = {});

/// Adds word surprisals (sum over each word's tokens) for every lens in the
/// table. Text token j of the alignment is scored at table position
/// j + token_shift: 0 when a BOS token was prepended to the model input, -1
/// when the text starts at position 0.
void word_surprisals(SurprisalTable& table, const WordAlignment& alignment, int token_shift);

double perplexity(const ModelBundle& model, std::span<const TokenId> ids, int layer, LensKind lens,
                  const TranslatorSet* translators = nullptr);

/// TSV rows: seq_id, layer, lens, unit, index, surprisal_nats. Word indices
/// are offset by first_word_index. Layer 0 and an empty lens filter write
/// everything.
void write_surprisal_tsv(std::ostream& out, const SurprisalTable& table, int layer = 0,
                         std::optional<LensKind> lens = std::nullopt, bool header = true);
inline constexpr std::string_view kSurprisalTsvHeader =
    "seq_id\tlayer\tlens\tunit\tindex\tsurprisal_nats";

// ---------------------------------------------------------------------------
// Tuned-lens training

/// Translator parameters in double precision during optimisation.
struct AffineParams {
  int d = 0;
  std::vector<double> weight;  // d x d row-major
  std::vector<double> bias;

  static AffineParams identity(int d);
  Translator to_translator(int layer) const;
};

/// Mean KL objective between the final-layer distribution and the lens applied
/// to h W + b, over a fixed set of positions for one layer.
class KlObjective {
 public:
  KlObjective(const ModelBundle& model, std::vector<std::vector<float>> hidden,
              std::vector<std::vector<double>> target_log_probs, KlDirection direction);

  std::size_t size() const { return hidden_.size(); }

  double value(const AffineParams& params) const;
  double value(const AffineParams& params, std::span<const std::size_t> subset) const;

  /// Mean objective over `subset` and its gradient with respect to W and b.
  double value_and_gradient(const AffineParams& params, std::span<const std::size_t> subset,
                            AffineParams& gradient) const;

 private:
  double sample(const AffineParams& params, std::size_t index, AffineParams* gradient) const;

  const ModelBundle* model_;
  std::vector<std::vector<float>> hidden_;
  std::vector<std::vector<double>> target_;
  KlDirection direction_;
};

struct TrainingOptions {
  double learning_rate = 0.5;
  int steps = 200;
  int batch_size = 64;
  bool cosine_decay = true;
  double validation_fraction = 0.2;
  int eval_every = 50;
  KlDirection direction = KlDirection::forward;
  std::uint64_t seed = 0;
};

struct KlCurvePoint {
  int layer = 0;
  int step = 0;
  double train_kl = 0.0;
  double validation_kl = 0.0;
};

struct TrainingResult {
  TranslatorSet translators;
  std::vector<KlCurvePoint> curve;
  std::vector<double> initial_validation_kl;  // index layer-1
  std::vector<double> final_validation_kl;
};

/// Hidden states and final-layer log-probabilities at every position of every
/// sequence, grouped by layer.
struct LensTrainingData {
  std::vector<std::vector<std::vector<float>>> hidden;  // [layer-1][position]
  std::vector<std::vector<double>> final_log_probs;     // [position]
};

LensTrainingData collect_training_data(const ModelBundle& model,
                                       std::span<const std::vector<TokenId>> corpus);

/// Plain minibatch gradient descent from the identity, one translator per
/// layer 1..L-1. Throws DataError if the objective turns non-finite.
TrainingResult train_translators(const ModelBundle& model,
                                 std::span<const std::vector<TokenId>> corpus,
                                 const TrainingOptions& options);

}  // namespace lenspsych
