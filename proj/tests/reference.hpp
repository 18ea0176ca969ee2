#pragma once

// Slow, obviously-correct reference implementations used as test oracles.
// Nothing here calls into the library's kernels.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "overfill/model.hpp"

namespace ref {

using Matrix = std::vector<std::vector<double>>;

inline std::vector<double> vec_mat(const std::vector<double>& x, const overfill::Tensor<double>& w) {
  const std::size_t k = w.dim(0), n = w.dim(1);
  std::vector<double> y(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

inline std::vector<double> rms(const std::vector<double>& x, const overfill::Tensor<double>& g, double eps) {
  double ss = 0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * g[i];
  return y;
}

inline void rotate(std::vector<double>& x, std::size_t head_dim, std::size_t pos, double theta) {
  for (std::size_t h = 0; h < x.size() / head_dim; ++h) {
    for (std::size_t i = 0; i < head_dim / 2; ++i) {
      const double ang = static_cast<double>(pos) * std::pow(theta, -2.0 * static_cast<double>(i) / head_dim);
      double& a = x[h * head_dim + 2 * i];
      double& b = x[h * head_dim + 2 * i + 1];
      const double a0 = a, b0 = b;
      a = a0 * std::cos(ang) - b0 * std::sin(ang);
      b = a0 * std::sin(ang) + b0 * std::cos(ang);
    }
  }
}

/// (position, layer, tap 0..2, activation): attention input, FFN input, FFN
/// inner product.
using Tap = std::function<void(std::size_t, std::size_t, int, const std::vector<double>&)>;

/// Logits for every position of `tokens`. Positions [0, split) run through
/// `first` and the rest through `second`; each layer's keys and values for a
/// position come from whichever model processed it. split == tokens.size()
/// gives a single-model forward.
inline Matrix forward(const overfill::Weights<double>& first, const overfill::Weights<double>& second,
                      const std::vector<std::int32_t>& tokens, std::size_t split, const Tap& tap = {}) {
  const auto& c = first.config;
  const std::size_t dh = c.head_dim, group = c.n_heads / c.n_kv_heads;
  std::vector<Matrix> keys(c.n_layers), vals(c.n_layers);
  Matrix logits;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const auto& w = pos < split ? first : second;
    const std::size_t d = w.config.hidden_dim;
    std::vector<double> x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = w.token_embedding.at(tokens[pos], i);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& lw = w.layers[l];
      auto h = rms(x, lw.attn_norm, c.norm_eps);
      if (tap) tap(pos, l, 0, h);
      auto q = vec_mat(h, lw.wq), k = vec_mat(h, lw.wk), v = vec_mat(h, lw.wv);
      rotate(q, dh, pos, c.rope_theta);
      rotate(k, dh, pos, c.rope_theta);
      keys[l].push_back(k);
      vals[l].push_back(v);
      std::vector<double> o(c.attn_dim(), 0.0);
      for (std::size_t head = 0; head < c.n_heads; ++head) {
        const std::size_t kvh = head / group;
        std::vector<double> s(pos + 1);
        double top = -1e300;
        for (std::size_t j = 0; j <= pos; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[head * dh + e] * keys[l][j][kvh * dh + e];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          top = std::max(top, s[j]);
        }
        double z = 0;
        for (double& v2 : s) z += (v2 = std::exp(v2 - top));
        for (std::size_t j = 0; j <= pos; ++j) {
          for (std::size_t e = 0; e < dh; ++e) o[head * dh + e] += s[j] / z * vals[l][j][kvh * dh + e];
        }
      }
      auto ao = vec_mat(o, lw.wo);
      for (std::size_t i = 0; i < d; ++i) x[i] += ao[i];
      auto h2 = rms(x, lw.ffn_norm, c.norm_eps);
      if (tap) tap(pos, l, 1, h2);
      auto g = vec_mat(h2, lw.w_gate), u = vec_mat(h2, lw.w_up);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
      if (tap) tap(pos, l, 2, g);
      auto f = vec_mat(g, lw.w_down);
      for (std::size_t i = 0; i < d; ++i) x[i] += f[i];
    }
    auto hf = rms(x, w.final_norm, c.norm_eps);
    std::vector<double> out(c.vocab_size, 0.0);
    for (std::size_t t = 0; t < c.vocab_size; ++t) {
      for (std::size_t i = 0; i < d; ++i) {
        out[t] += hf[i] * (w.config.tied_embeddings ? w.token_embedding.at(t, i) : w.lm_head.at(i, t));
      }
    }
    logits.push_back(out);
  }
  return logits;
}

inline Matrix forward(const overfill::Weights<double>& w, const std::vector<std::int32_t>& tokens) {
  return forward(w, w, tokens, tokens.size());
}

inline std::int32_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<std::int32_t>(best);
}

/// Greedy rollout recomputing everything from scratch at every step.
inline std::vector<std::int32_t> greedy(const overfill::Weights<double>& first, const overfill::Weights<double>& second,
                                        std::vector<std::int32_t> seq, std::size_t split, std::size_t n,
                                        std::int32_t stop) {
  std::vector<std::int32_t> out;
  while (out.size() < n) {
    const auto logits = forward(first, second, seq, split);
    const std::int32_t t = argmax(logits.back());
    out.push_back(t);
    if (t == stop) break;
    seq.push_back(t);
  }
  return out;
}

}  // namespace ref
