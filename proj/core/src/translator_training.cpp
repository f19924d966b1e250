#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "lenspsych/errors.hpp"
#include "lenspsych/lens.hpp"

namespace lenspsych {

AffineParams AffineParams::identity(int d) {
  AffineParams p;
  p.d = d;
  p.weight.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) p.weight[static_cast<std::size_t>(i) * d + i] = 1.0;
  p.bias.assign(d, 0.0);
  return p;
}

Translator AffineParams::to_translator(int layer) const {
  Translator t;
  t.layer = layer;
  t.weight = Matrix(d, d);
  std::transform(weight.begin(), weight.end(), t.weight.values().begin(),
                 [](double v) { return static_cast<float>(v); });
  t.bias.assign(bias.begin(), bias.end());
  return t;
}

KlObjective::KlObjective(const ModelBundle& model, std::vector<std::vector<float>> hidden,
                         std::vector<std::vector<double>> target_log_probs, KlDirection direction)
    : model_(&model),
      hidden_(std::move(hidden)),
      target_(std::move(target_log_probs)),
      direction_(direction) {
  if (hidden_.size() != target_.size())
    throw DataError("objective needs one target distribution per hidden state");
}

double KlObjective::sample(const AffineParams& params, std::size_t index,
                           AffineParams* gradient) const {
  const auto& m = *model_;
  const std::size_t d = m.config.d_model, V = m.config.vocab_size;
  const auto& h = hidden_[index];
  const auto& target = target_[index];

  std::vector<double> z(params.bias);
  for (std::size_t i = 0; i < d; ++i) {
    const double hi = h[i];
    const double* row = params.weight.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) z[k] += hi * row[k];
  }

  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(m.config.ln_epsilon));

  std::vector<double> xhat(d), u(d);
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (z[i] - mean) * inv;
    u[i] = xhat[i] * m.final_norm.gain[i] + m.final_norm.bias[i];
  }

  std::vector<double> logits(V, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const auto row = m.unembedding.row(i);
    for (std::size_t j = 0; j < V; ++j) logits[j] += u[i] * row[j];
  }
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - max_logit);
  const double log_z = max_logit + std::log(total);

  std::vector<double> dlogits(V);
  double kl = 0.0;
  if (direction_ == KlDirection::forward) {
    for (std::size_t j = 0; j < V; ++j) {
      const double logq = logits[j] - log_z;
      const double p = std::exp(target[j]);
      if (p > 0.0) kl += p * (target[j] - logq);
      dlogits[j] = std::exp(logq) - p;
    }
  } else {
    for (std::size_t j = 0; j < V; ++j) {
      const double logq = logits[j] - log_z;
      kl += std::exp(logq) * (logq - target[j]);
    }
    for (std::size_t j = 0; j < V; ++j) {
      const double logq = logits[j] - log_z;
      dlogits[j] = std::exp(logq) * (logq - target[j] - kl);
    }
  }
  if (!gradient) return kl;

  std::vector<double> ghat(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const auto row = m.unembedding.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < V; ++j) acc += dlogits[j] * row[j];
    ghat[i] = acc * m.final_norm.gain[i];
  }
  double mean_g = 0.0, mean_gx = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    mean_g += ghat[i];
    mean_gx += ghat[i] * xhat[i];
  }
  mean_g /= static_cast<double>(d);
  mean_gx /= static_cast<double>(d);

  std::vector<double> dz(d);
  for (std::size_t k = 0; k < d; ++k) dz[k] = inv * (ghat[k] - mean_g - xhat[k] * mean_gx);
  for (std::size_t k = 0; k < d; ++k) gradient->bias[k] += dz[k];
  for (std::size_t i = 0; i < d; ++i) {
    const double hi = h[i];
    double* row = gradient->weight.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) row[k] += hi * dz[k];
  }
  return kl;
}

double KlObjective::value(const AffineParams& params) const {
  double total = 0.0;
  for (std::size_t i = 0; i < hidden_.size(); ++i) total += sample(params, i, nullptr);
  return hidden_.empty() ? 0.0 : total / static_cast<double>(hidden_.size());
}

double KlObjective::value(const AffineParams& params, std::span<const std::size_t> subset) const {
  double total = 0.0;
  for (auto i : subset) total += sample(params, i, nullptr);
  return subset.empty() ? 0.0 : total / static_cast<double>(subset.size());
}

double KlObjective::value_and_gradient(const AffineParams& params,
                                       std::span<const std::size_t> subset,
                                       AffineParams& gradient) const {
  const int d = model_->config.d_model;
  gradient.d = d;
  gradient.weight.assign(static_cast<std::size_t>(d) * d, 0.0);
  gradient.bias.assign(d, 0.0);
  double total = 0.0;
  for (auto i : subset) total += sample(params, i, &gradient);
  if (subset.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(subset.size());
  for (auto& g : gradient.weight) g *= scale;
  for (auto& g : gradient.bias) g *= scale;
  return total * scale;
}

LensTrainingData collect_training_data(const ModelBundle& model,
                                       std::span<const std::vector<TokenId>> corpus) {
  const int L = model.config.n_layers;
  const std::size_t P = model.config.max_positions;
  LensTrainingData data;
  data.hidden.resize(L);
  for (const auto& seq : corpus) {
    for (std::size_t start = 0; start < seq.size(); start += P) {
      const std::size_t len = std::min(P, seq.size() - start);
      const auto stream = forward_capture(model, std::span(seq).subspan(start, len));
      for (std::size_t t = 0; t < len; ++t) {
        for (int l = 1; l <= L; ++l) {
          const auto h = stream.state(l, static_cast<int>(t));
          data.hidden[l - 1].emplace_back(h.begin(), h.end());
        }
        data.final_log_probs.push_back(log_softmax(stream.final_logits().row(t)));
      }
    }
  }
  return data;
}

TrainingResult train_translators(const ModelBundle& model,
                                 std::span<const std::vector<TokenId>> corpus,
                                 const TrainingOptions& options) {
  const int L = model.config.n_layers, d = model.config.d_model;
  if (options.steps < 0 || options.batch_size < 1 || !(options.learning_rate > 0.0))
    throw ConfigError("lens training needs steps >= 0, batch >= 1, learning rate > 0");
  if (!(options.validation_fraction > 0.0 && options.validation_fraction < 1.0))
    throw ConfigError("validation fraction must lie in (0, 1)");

  auto data = collect_training_data(model, corpus);
  const std::size_t n = data.final_log_probs.size();
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(options.validation_fraction * static_cast<double>(n))));
  if (n < n_val + static_cast<std::size_t>(options.batch_size))
    throw DataError("lens training corpus supplies " + std::to_string(n) +
                    " positions; need at least batch (" + std::to_string(options.batch_size) +
                    ") plus validation (" + std::to_string(n_val) + ")");
  const std::size_t n_train = n - n_val;
  std::vector<std::size_t> train_idx(n_train), val_idx(n_val);
  for (std::size_t i = 0; i < n_train; ++i) train_idx[i] = i;
  for (std::size_t i = 0; i < n_val; ++i) val_idx[i] = n_train + i;

  TrainingResult result;
  std::vector<Translator> translators;
  for (int layer = 1; layer < L; ++layer) {
    KlObjective objective(model, std::move(data.hidden[layer - 1]), data.final_log_probs,
                          options.direction);
    auto params = AffineParams::identity(d);
    const double initial_val = objective.value(params, val_idx);
    result.initial_validation_kl.push_back(initial_val);
    result.curve.push_back({layer, 0, objective.value(params, train_idx), initial_val});

    std::mt19937_64 rng(options.seed * 1000003ULL + static_cast<std::uint64_t>(layer));
    std::vector<std::size_t> order = train_idx;
    std::size_t cursor = order.size();
    std::vector<std::size_t> batch(static_cast<std::size_t>(options.batch_size));
    AffineParams grad;

    for (int step = 1; step <= options.steps; ++step) {
      for (auto& slot : batch) {
        if (cursor == order.size()) {
          for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<std::size_t>(rng() % (i + 1))]);
          cursor = 0;
        }
        slot = order[cursor++];
      }
      const double batch_kl = objective.value_and_gradient(params, batch, grad);
      if (!std::isfinite(batch_kl))
        throw DataError("translator training diverged at layer " + std::to_string(layer) +
                        ", step " + std::to_string(step));
      double lr = options.learning_rate;
      if (options.cosine_decay)
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * (step - 1) / options.steps));
      for (std::size_t i = 0; i < params.weight.size(); ++i) params.weight[i] -= lr * grad.weight[i];
      for (int k = 0; k < d; ++k) params.bias[k] -= lr * grad.bias[k];

      if (step == options.steps || (options.eval_every > 0 && step % options.eval_every == 0)) {
        const double val = objective.value(params, val_idx);
        if (!std::isfinite(val))
          throw DataError("translator training diverged at layer " + std::to_string(layer) +
                          ", step " + std::to_string(step));
        result.curve.push_back({layer, step, batch_kl, val});
      }
    }
    result.final_validation_kl.push_back(objective.value(params, val_idx));
    translators.push_back(params.to_translator(layer));
  }
  result.translators = TranslatorSet(L, d, std::move(translators));
  result.translators.direction = options.direction;
  return result;
}

}  // namespace lenspsych
