#include "overfill/model.hpp"

#include <algorithm>
#include <cmath>

#include "overfill/kernels.hpp"
#include "overfill/rng.hpp"

namespace overfill {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model config field '") + name + "' must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(hidden_dim, "hidden_dim");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(n_kv_heads, "n_kv_heads");
  positive(head_dim, "head_dim");
  positive(intermediate_dim, "intermediate_dim");
  if (n_heads % n_kv_heads != 0) throw ConfigError("model config field 'n_heads' must be divisible by n_kv_heads");
  if (head_dim % 2 != 0) throw ConfigError("model config field 'head_dim' must be even for rotary embeddings");
  if (!(norm_eps >= 0.0) || !std::isfinite(norm_eps)) throw ConfigError("model config field 'norm_eps' must be >= 0");
  if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) {
    throw ConfigError("model config field 'rope_theta' must be positive");
  }
}

CacheShape cache_shape(const ModelConfig& config) {
  return {config.n_layers, config.n_kv_heads, config.head_dim};
}

namespace {

template <typename T>
void expect_shape(const Tensor<T>& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw DimensionError("weight '" + name + "' has shape " + to_string(t.shape()) + ", expected " + to_string(shape));
  }
}

}  // namespace

template <typename T>
void check_weights(const Weights<T>& w) {
  const ModelConfig& c = w.config;
  c.validate();
  if (w.layers.size() != c.n_layers) {
    throw DimensionError("weights hold " + std::to_string(w.layers.size()) + " layers, config says " +
                         std::to_string(c.n_layers));
  }
  const std::size_t d = c.hidden_dim, i = c.intermediate_dim;
  expect_shape(w.token_embedding, {c.vocab_size, d}, "token_embedding");
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    expect_shape(lw.attn_norm, {d}, p + "attn_norm");
    expect_shape(lw.wq, {d, c.attn_dim()}, p + "wq");
    expect_shape(lw.wk, {d, c.kv_dim()}, p + "wk");
    expect_shape(lw.wv, {d, c.kv_dim()}, p + "wv");
    expect_shape(lw.wo, {c.attn_dim(), d}, p + "wo");
    expect_shape(lw.ffn_norm, {d}, p + "ffn_norm");
    expect_shape(lw.w_gate, {d, i}, p + "w_gate");
    expect_shape(lw.w_up, {d, i}, p + "w_up");
    expect_shape(lw.w_down, {i, d}, p + "w_down");
  }
  expect_shape(w.final_norm, {d}, "final_norm");
  if (c.tied_embeddings) {
    if (!w.lm_head.empty()) throw DimensionError("tied model must not store a separate lm_head");
  } else {
    expect_shape(w.lm_head, {d, c.vocab_size}, "lm_head");
  }
}

template <typename T>
std::size_t Weights<T>::allocated_params() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
bool Weights<T>::operator==(const Weights& other) const {
  return config == other.config && token_embedding == other.token_embedding && final_norm == other.final_norm &&
         lm_head == other.lm_head && frozen == other.frozen &&
         std::equal(layers.begin(), layers.end(), other.layers.begin(), other.layers.end(),
                    [](const LayerWeights<T>& a, const LayerWeights<T>& b) {
                      return a.attn_norm == b.attn_norm && a.wq == b.wq && a.wk == b.wk && a.wv == b.wv &&
                             a.wo == b.wo && a.ffn_norm == b.ffn_norm && a.w_gate == b.w_gate && a.w_up == b.w_up &&
                             a.w_down == b.w_down;
                    });
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  out.config = config;
  out.frozen = frozen;
  out.layers.resize(layers.size());
  auto conv = [](const Tensor<T>& t) { return t.empty() ? Tensor<U>() : t.template cast<U>(); };
  out.token_embedding = conv(token_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    auto& b = out.layers[l];
    b.attn_norm = conv(a.attn_norm);
    b.wq = conv(a.wq);
    b.wk = conv(a.wk);
    b.wv = conv(a.wv);
    b.wo = conv(a.wo);
    b.ffn_norm = conv(a.ffn_norm);
    b.w_gate = conv(a.w_gate);
    b.w_up = conv(a.w_up);
    b.w_down = conv(a.w_down);
  }
  out.final_norm = conv(final_norm);
  out.lm_head = conv(lm_head);
  return out;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template Weights<double> Weights<double>::cast<double>() const;

template <typename T>
Weights<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.hidden_dim, i = config.intermediate_dim;
  const double base_std = 0.02;
  const double out_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  Weights<T> w;
  w.config = config;
  w.layers.resize(config.n_layers);
  w.token_embedding = Tensor<T>({config.vocab_size, d});
  for (auto& l : w.layers) {
    l.attn_norm = Tensor<T>({d}, T{1});
    l.wq = Tensor<T>({d, config.attn_dim()});
    l.wk = Tensor<T>({d, config.kv_dim()});
    l.wv = Tensor<T>({d, config.kv_dim()});
    l.wo = Tensor<T>({config.attn_dim(), d});
    l.ffn_norm = Tensor<T>({d}, T{1});
    l.w_gate = Tensor<T>({d, i});
    l.w_up = Tensor<T>({d, i});
    l.w_down = Tensor<T>({i, d});
  }
  w.final_norm = Tensor<T>({d}, T{1});
  if (!config.tied_embeddings) w.lm_head = Tensor<T>({d, config.vocab_size});

  // One generator stream per tensor, so each tensor's values depend only on
  // (seed, its position in the parameter order).
  std::uint64_t stream = 0;
  w.for_each_param([&](const std::string& name, Tensor<T>& t) {
    ++stream;
    const bool is_norm = name.ends_with("norm");
    if (is_norm) return;
    const bool is_output = name.ends_with(".wo") || name.ends_with(".w_down");
    const double stddev = is_output ? out_std : base_std;
    CounterRng rng(seed, stream);
    for (T& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  });
  return w;
}

template Weights<float> init_model<float>(const ModelConfig&, std::uint64_t);
template Weights<double> init_model<double>(const ModelConfig&, std::uint64_t);

// ---- KV cache --------------------------------------------------------------

template <typename T>
KVCache<T>::KVCache(CacheShape shape) : shape_(shape), keys_(shape.n_layers), values_(shape.n_layers) {
  if (shape.n_layers == 0 || shape.row_width() == 0) throw DimensionError("cache geometry must be non-empty");
}

template <typename T>
void KVCache<T>::append(std::size_t layer, std::span<const T> k_rows, std::span<const T> v_rows) {
  if (layer >= shape_.n_layers) throw DimensionError("cache has no layer " + std::to_string(layer));
  if (k_rows.size() != v_rows.size() || k_rows.size() % shape_.row_width() != 0) {
    throw DimensionError("cache rows must be multiples of width " + std::to_string(shape_.row_width()));
  }
  keys_[layer].insert(keys_[layer].end(), k_rows.begin(), k_rows.end());
  values_[layer].insert(values_[layer].end(), v_rows.begin(), v_rows.end());
}

template <typename T>
void KVCache<T>::commit(std::size_t n) {
  for (std::size_t l = 0; l < shape_.n_layers; ++l) {
    if (rows_in(l) != filled_ + n) {
      throw DimensionError("cache layer " + std::to_string(l) + " holds " + std::to_string(rows_in(l)) +
                           " rows, expected " + std::to_string(filled_ + n));
    }
  }
  filled_ += n;
}

template class KVCache<float>;
template class KVCache<double>;

// ---- inference path --------------------------------------------------------

namespace {

template <typename T>
void check_cache(const Weights<T>& w, const KVCache<T>& cache) {
  const CacheShape want = cache_shape(w.config);
  if (cache.shape() != want) {
    throw DimensionError("cache geometry (L=" + std::to_string(cache.shape().n_layers) +
                         ", Hkv=" + std::to_string(cache.shape().n_kv_heads) +
                         ", d=" + std::to_string(cache.shape().head_dim) + ") does not match model (L=" +
                         std::to_string(want.n_layers) + ", Hkv=" + std::to_string(want.n_kv_heads) +
                         ", d=" + std::to_string(want.head_dim) + ")");
  }
}

template <typename T>
kernels::AttentionGeometry geometry(const ModelConfig& c) {
  return {c.n_heads, c.n_kv_heads, c.head_dim};
}

template <typename T>
void add_inplace(Tensor<T>& x, const Tensor<T>& y) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

}  // namespace

template <typename T>
Tensor<T> forward_tokens(const Weights<T>& w, std::span<const std::int32_t> tokens, KVCache<T>& cache,
                         const ActivationHook<T>& hook) {
  const ModelConfig& c = w.config;
  check_cache(w, cache);
  if (tokens.empty()) throw std::invalid_argument("forward pass needs at least one token");
  const std::size_t n = tokens.size();
  const std::size_t d = c.hidden_dim;
  const std::size_t start = cache.filled_len();
  const T eps = static_cast<T>(c.norm_eps);

  Tensor<T> x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                              std::to_string(c.vocab_size));
    }
    std::copy_n(w.token_embedding.data() + static_cast<std::size_t>(tokens[i]) * d, d, x.data() + i * d);
  }
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = start + i;

  const auto geo = geometry<T>(c);
  const std::size_t kv_width = c.kv_dim();
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    Tensor<T> xn = kernels::rms_norm(x, lw.attn_norm, eps);
    if (hook) hook(l, HookPoint::pre_attn, xn);
    Tensor<T> q = kernels::matmul(xn, lw.wq);
    Tensor<T> k = kernels::matmul(xn, lw.wk);
    Tensor<T> v = kernels::matmul(xn, lw.wv);
    kernels::rope_rows_inplace<T>(q.values(), q.cols(), c.head_dim, positions, c.rope_theta);
    kernels::rope_rows_inplace<T>(k.values(), k.cols(), c.head_dim, positions, c.rope_theta);
    cache.append(l, k.values(), v.values());

    Tensor<T> attn({n, c.attn_dim()});
    const kernels::KeyValueSource<T> src{cache.keys(l).data(), cache.values(l).data(), start + n,
                                         nullptr, nullptr, kv_width};
    for (std::size_t i = 0; i < n; ++i) {
      kernels::attend_row(q.data() + i * c.attn_dim(), src, start + i + 1, geo, attn.data() + i * c.attn_dim());
    }
    add_inplace(x, kernels::matmul(attn, lw.wo));

    Tensor<T> hn = kernels::rms_norm(x, lw.ffn_norm, eps);
    if (hook) hook(l, HookPoint::pre_ffn, hn);
    Tensor<T> inner = kernels::swiglu(kernels::matmul(hn, lw.w_gate), kernels::matmul(hn, lw.w_up));
    if (hook) hook(l, HookPoint::ffn_inner, inner);
    add_inplace(x, kernels::matmul(inner, lw.w_down));
  }
  cache.commit(n);
  return kernels::rms_norm(x, w.final_norm, eps);
}

template <typename T>
Tensor<T> lm_logits(const Weights<T>& w, const Tensor<T>& hidden) {
  return w.config.tied_embeddings ? kernels::matmul_bt(hidden, w.token_embedding) : kernels::matmul(hidden, w.lm_head);
}

template <typename T>
PrefillResult<T> forward_prefill(const Weights<T>& w, std::span<const std::int32_t> tokens, KVCache<T>& cache) {
  if (!cache.empty()) throw std::invalid_argument("prefill expects an empty cache");
  if (tokens.empty()) throw std::invalid_argument("prefill needs a non-empty prompt");
  Tensor<T> hidden = forward_tokens(w, tokens, cache);
  const std::size_t d = w.config.hidden_dim;
  Tensor<T> last({1, d}, std::vector<T>(hidden.data() + (tokens.size() - 1) * d, hidden.data() + tokens.size() * d));
  Tensor<T> logits = lm_logits(w, last);
  return {last.reshaped({d}), logits.reshaped({w.config.vocab_size})};
}

template <typename T>
Tensor<T> decode_step(const Weights<T>& w, std::int32_t token, KVCache<T>& cache, std::size_t position) {
  check_cache(w, cache);
  if (position != cache.filled_len()) {
    throw std::invalid_argument("decode position " + std::to_string(position) + " does not match cache length " +
                                std::to_string(cache.filled_len()));
  }
  const std::int32_t ids[1] = {token};
  Tensor<T> hidden = forward_tokens(w, std::span<const std::int32_t>(ids), cache);
  return lm_logits(w, hidden).reshaped({w.config.vocab_size});
}

// ---- differentiable path ---------------------------------------------------

template <typename T>
ParamVars bind_weights(Tape<T>& tape, const Weights<T>& w, bool trainable) {
  ParamVars pv;
  auto bind = [&](const Tensor<T>& t) {
    Var v = trainable ? tape.parameter(t) : tape.constant_view(t);
    pv.all.push_back(v);
    return v;
  };
  pv.token_embedding = bind(w.token_embedding);
  for (const auto& l : w.layers) {
    ParamVars::Layer lv;
    lv.attn_norm = bind(l.attn_norm);
    lv.wq = bind(l.wq);
    lv.wk = bind(l.wk);
    lv.wv = bind(l.wv);
    lv.wo = bind(l.wo);
    lv.ffn_norm = bind(l.ffn_norm);
    lv.w_gate = bind(l.w_gate);
    lv.w_up = bind(l.w_up);
    lv.w_down = bind(l.w_down);
    pv.layers.push_back(lv);
  }
  pv.final_norm = bind(w.final_norm);
  if (!w.config.tied_embeddings) pv.lm_head = bind(w.lm_head);
  return pv;
}

template <typename T>
void PackedTokens<T>::add_segment(std::span<const std::int32_t> tokens, const KVCache<T>* prefix) {
  const std::size_t start = prefix ? prefix->filled_len() : 0;
  segments.push_back({ids.size(), tokens.size(), prefix});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    ids.push_back(tokens[i]);
    positions.push_back(start + i);
  }
}

template struct PackedTokens<float>;
template struct PackedTokens<double>;

template <typename T>
Var forward_train(Tape<T>& tape, const Weights<T>& w, const ParamVars& vars, const PackedTokens<T>& batch) {
  const ModelConfig& c = w.config;
  const T eps = static_cast<T>(c.norm_eps);
  for (const auto& s : batch.segments) {
    if (s.prefix) check_cache(w, *s.prefix);
  }
  const auto geo = geometry<T>(c);
  std::vector<AttentionSegment<T>> segs(batch.segments.size());

  Var x = ad::embedding(tape, vars.token_embedding, std::span<const std::int32_t>(batch.ids));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lv = vars.layers[l];
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const auto& src = batch.segments[s];
      segs[s].offset = src.offset;
      segs[s].length = src.length;
      if (src.prefix && !src.prefix->empty()) {
        segs[s].prefix_k = src.prefix->keys(l).data();
        segs[s].prefix_v = src.prefix->values(l).data();
        segs[s].prefix_len = src.prefix->filled_len();
      } else {
        segs[s].prefix_k = segs[s].prefix_v = nullptr;
        segs[s].prefix_len = 0;
      }
    }
    Var xn = ad::rms_norm(tape, x, lv.attn_norm, eps);
    Var q = ad::rope(tape, ad::matmul(tape, xn, lv.wq), batch.positions, c.head_dim, c.rope_theta);
    Var k = ad::rope(tape, ad::matmul(tape, xn, lv.wk), batch.positions, c.head_dim, c.rope_theta);
    Var v = ad::matmul(tape, xn, lv.wv);
    Var attn = ad::causal_attention(tape, q, k, v, std::span<const AttentionSegment<T>>(segs), geo);
    x = ad::add(tape, x, ad::matmul(tape, attn, lv.wo));

    Var hn = ad::rms_norm(tape, x, lv.ffn_norm, eps);
    Var inner = ad::swiglu(tape, ad::matmul(tape, hn, lv.w_gate), ad::matmul(tape, hn, lv.w_up));
    x = ad::add(tape, x, ad::matmul(tape, inner, lv.w_down));
  }
  Var h = ad::rms_norm(tape, x, vars.final_norm, eps);
  return c.tied_embeddings ? ad::matmul_bt(tape, h, vars.token_embedding) : ad::matmul(tape, h, vars.lm_head);
}

#define OVERFILL_INSTANTIATE(T)                                                                                 \
  template void check_weights<T>(const Weights<T>&);                                                           \
  template Tensor<T> forward_tokens<T>(const Weights<T>&, std::span<const std::int32_t>, KVCache<T>&,          \
                                       const ActivationHook<T>&);                                              \
  template Tensor<T> lm_logits<T>(const Weights<T>&, const Tensor<T>&);                                         \
  template PrefillResult<T> forward_prefill<T>(const Weights<T>&, std::span<const std::int32_t>, KVCache<T>&); \
  template Tensor<T> decode_step<T>(const Weights<T>&, std::int32_t, KVCache<T>&, std::size_t);                \
  template ParamVars bind_weights<T>(Tape<T>&, const Weights<T>&, bool);                                       \
  template Var forward_train<T>(Tape<T>&, const Weights<T>&, const ParamVars&, const PackedTokens<T>&);

OVERFILL_INSTANTIATE(float)
OVERFILL_INSTANTIATE(double)
#undef OVERFILL_INSTANTIATE

}  // namespace overfill
