#pragma once
// Independent reference implementations used only by tests. Nothing here
// calls into the library's numeric code paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lenspsych/model.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline Vec layer_norm(const Vec& x, const lenspsych::LayerNormParams& p, double eps) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  Vec out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * p.gain[i] + p.bias[i];
  return out;
}

inline Vec matvec(const Vec& x, const lenspsych::Matrix& w, const std::vector<float>* bias = nullptr) {
  Vec out(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = bias ? (*bias)[j] : 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) s += x[i] * w(i, j);
    out[j] = s;
  }
  return out;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

struct Forward {
  std::vector<std::vector<Vec>> states;  // [layer-1][position]
  std::vector<Vec> logits;               // [position]
};

/// Straight-line double-precision GPT-2 (pre-LN) forward pass.
inline Forward forward(const lenspsych::ModelBundle& m, std::span<const lenspsych::TokenId> ids) {
  const auto& c = m.config;
  const std::size_t T = ids.size(), d = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.n_heads), hd = d / H;
  const double eps = c.ln_epsilon;
  std::vector<Vec> h(T, Vec(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i) h[t][i] = m.token_embedding(ids[t], i) + m.position_embedding(t, i);

  Forward out;
  for (const auto& b : m.blocks) {
    std::vector<Vec> q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto qkv = matvec(layer_norm(h[t], b.ln_attn, eps), b.attn_qkv, &b.attn_qkv_bias);
      q[t].assign(qkv.begin(), qkv.begin() + d);
      k[t].assign(qkv.begin() + d, qkv.begin() + 2 * d);
      v[t].assign(qkv.begin() + 2 * d, qkv.end());
    }
    std::vector<Vec> attn(T, Vec(d, 0.0));
    for (std::size_t head = 0; head < H; ++head) {
      const std::size_t o = head * hd;
      for (std::size_t t = 0; t < T; ++t) {
        Vec score(t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t i = 0; i < hd; ++i) dot += q[t][o + i] * k[s][o + i];
          score[s] = dot / std::sqrt(static_cast<double>(hd));
        }
        const double mx = *std::max_element(score.begin(), score.end());
        double z = 0.0;
        for (auto& s : score) z += (s = std::exp(s - mx));
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t i = 0; i < hd; ++i) attn[t][o + i] += score[s] / z * v[s][o + i];
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const auto proj = matvec(attn[t], b.attn_out, &b.attn_out_bias);
      for (std::size_t i = 0; i < d; ++i) h[t][i] += proj[i];
      auto mid = matvec(layer_norm(h[t], b.ln_mlp, eps), b.mlp_in, &b.mlp_in_bias);
      for (auto& x : mid) x = gelu(x);
      const auto back = matvec(mid, b.mlp_out, &b.mlp_out_bias);
      for (std::size_t i = 0; i < d; ++i) h[t][i] += back[i];
    }
    out.states.push_back(h);
  }
  for (std::size_t t = 0; t < T; ++t) out.logits.push_back(matvec(layer_norm(h[t], m.final_norm, eps), m.unembedding));
  return out;
}

inline Vec log_softmax(const Vec& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  Vec out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

/// Logit lens at an arbitrary hidden state, in double.
inline Vec logit_lens(const lenspsych::ModelBundle& m, const Vec& h) {
  return log_softmax(matvec(layer_norm(h, m.final_norm, m.config.ln_epsilon), m.unembedding));
}

struct NormalEquations {
  std::vector<long double> beta;
  long double rss = 0.0L;
  long double loglik = 0.0L;
};

/// Solves X'X b = X'y by Gaussian elimination with partial pivoting in long
/// double. X is row-major n x p with full column rank.
inline NormalEquations normal_equations(const std::vector<std::vector<double>>& X, const std::vector<double>& y) {
  const std::size_t n = X.size(), p = X.front().size();
  std::vector<std::vector<long double>> A(p, std::vector<long double>(p + 1, 0.0L));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < p; ++a) {
      for (std::size_t b = 0; b < p; ++b) A[a][b] += static_cast<long double>(X[i][a]) * X[i][b];
      A[a][p] += static_cast<long double>(X[i][a]) * y[i];
    }
  for (std::size_t col = 0; col < p; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < p; ++r)
      if (std::fabs(A[r][col]) > std::fabs(A[piv][col])) piv = r;
    std::swap(A[col], A[piv]);
    if (A[col][col] == 0.0L) throw std::runtime_error("singular normal equations");
    for (std::size_t r = 0; r < p; ++r) {
      if (r == col) continue;
      const long double f = A[r][col] / A[col][col];
      for (std::size_t k = col; k <= p; ++k) A[r][k] -= f * A[col][k];
    }
  }
  NormalEquations out;
  for (std::size_t a = 0; a < p; ++a) out.beta.push_back(A[a][p] / A[a][a]);
  for (std::size_t i = 0; i < n; ++i) {
    long double fit = 0.0L;
    for (std::size_t a = 0; a < p; ++a) fit += out.beta[a] * X[i][a];
    out.rss += (y[i] - fit) * (y[i] - fit);
  }
  const long double nn = static_cast<long double>(n);
  out.loglik = -nn / 2.0L * (std::log(2.0L * static_cast<long double>(M_PI) * out.rss / nn) + 1.0L);
  return out;
}

/// Hand-countable bigram statistics over whitespace-split sentences.
struct BigramCounts {
  std::map<std::pair<std::string, std::string>, double> pair;
  std::map<std::string, double> context;
  std::vector<std::string> types;  // targets seen

  explicit BigramCounts(const std::vector<std::vector<std::string>>& sentences) {
    for (const auto& s : sentences) {
      std::string prev = "<s>";
      for (const auto& w : s) {
        pair[{prev, w}] += 1;
        context[prev] += 1;
        if (std::find(types.begin(), types.end(), w) == types.end()) types.push_back(w);
        prev = w;
      }
    }
  }
};

}  // namespace oracle
