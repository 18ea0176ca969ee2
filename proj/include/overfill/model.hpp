#pragma once

// Llama-style decoder-only transformer: RMSNorm, rotary grouped-query
// attention, gated SiLU feed-forward. The KV cache geometry depends only on
// (n_layers, n_kv_heads, head_dim), never on hidden_dim or
// intermediate_dim, so a width-pruned model reads and extends a cache
// written by its unpruned parent.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "overfill/autograd.hpp"
#include "overfill/tensor.hpp"

namespace overfill {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t vocab_size = 260;
  std::size_t hidden_dim = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t head_dim = 16;
  std::size_t intermediate_dim = 256;
  double norm_eps = 1e-5;
  double rope_theta = 10000.0;
  bool tied_embeddings = false;

  std::size_t attn_dim() const noexcept { return n_heads * head_dim; }
  std::size_t kv_dim() const noexcept { return n_kv_heads * head_dim; }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct CacheShape {
  std::size_t n_layers = 0;
  std::size_t n_kv_heads = 0;
  std::size_t head_dim = 0;

  std::size_t row_width() const noexcept { return n_kv_heads * head_dim; }
  bool operator==(const CacheShape&) const = default;
};

CacheShape cache_shape(const ModelConfig& config);

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // [D]
  Tensor<T> wq;         // [D x H*d]
  Tensor<T> wk;         // [D x Hkv*d]
  Tensor<T> wv;         // [D x Hkv*d]
  Tensor<T> wo;         // [H*d x D]
  Tensor<T> ffn_norm;   // [D]
  Tensor<T> w_gate;     // [D x I]
  Tensor<T> w_up;       // [D x I]
  Tensor<T> w_down;     // [I x D]
};

template <typename T>
struct Weights {
  ModelConfig config;
  Tensor<T> token_embedding;  // [vocab x D]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // [D]
  Tensor<T> lm_head;     // [D x vocab]; null when tied to token_embedding
  bool frozen = false;

  /// Visits every stored tensor in a fixed order with its checkpoint name.
  template <typename F>
  void for_each_param(F&& fn) {
    visit(*this, fn);
  }
  template <typename F>
  void for_each_param(F&& fn) const {
    visit(*this, fn);
  }

  /// Number of scalars actually allocated.
  std::size_t allocated_params() const;

  template <typename U>
  Weights<U> cast() const;

  bool operator==(const Weights& other) const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& fn) {
    fn(std::string("token_embedding"), self.token_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      fn(p + "attn_norm", l.attn_norm);
      fn(p + "wq", l.wq);
      fn(p + "wk", l.wk);
      fn(p + "wv", l.wv);
      fn(p + "wo", l.wo);
      fn(p + "ffn_norm", l.ffn_norm);
      fn(p + "w_gate", l.w_gate);
      fn(p + "w_up", l.w_up);
      fn(p + "w_down", l.w_down);
    }
    fn(std::string("final_norm"), self.final_norm);
    if (!self.config.tied_embeddings) fn(std::string("lm_head"), self.lm_head);
  }
};

/// Checks every tensor against the shapes implied by w.config.
template <typename T>
void check_weights(const Weights<T>& w);

/// Scaled-normal initialization. Output projections (wo, w_down) use
/// std 0.02 / sqrt(2 L), everything else 0.02; norm scales start at 1.
template <typename T>
Weights<T> init_model(const ModelConfig& config, std::uint64_t seed);

template <typename T>
class KVCache {
 public:
  KVCache() = default;
  explicit KVCache(CacheShape shape);

  const CacheShape& shape() const noexcept { return shape_; }
  std::size_t filled_len() const noexcept { return filled_; }
  bool empty() const noexcept { return filled_ == 0; }

  /// Rows [0, rows_in(layer)) of one layer, each row_width() values. During
  /// a forward pass a layer may hold rows beyond filled_len().
  std::span<const T> keys(std::size_t layer) const { return keys_.at(layer); }
  std::span<const T> values(std::size_t layer) const { return values_.at(layer); }
  std::size_t rows_in(std::size_t layer) const { return keys_.at(layer).size() / shape_.row_width(); }

  void append(std::size_t layer, std::span<const T> k_rows, std::span<const T> v_rows);
  /// Marks n freshly appended rows as filled; every layer must hold them.
  void commit(std::size_t n);

  bool operator==(const KVCache&) const = default;

 private:
  CacheShape shape_;
  std::size_t filled_ = 0;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

enum class HookPoint { pre_attn, pre_ffn, ffn_inner };

/// Called with a layer index, a hook point, and the activation rows there.
template <typename T>
using ActivationHook = std::function<void(std::size_t, HookPoint, const Tensor<T>&)>;

/// Runs `tokens` through the model at positions cache.filled_len()...,
/// appending their keys and values. Returns final-normed hidden states
/// [n x D].
template <typename T>
Tensor<T> forward_tokens(const Weights<T>& w, std::span<const std::int32_t> tokens, KVCache<T>& cache,
                         const ActivationHook<T>& hook = {});

/// hidden [n x D] -> logits [n x vocab].
template <typename T>
Tensor<T> lm_logits(const Weights<T>& w, const Tensor<T>& hidden);

template <typename T>
struct PrefillResult {
  Tensor<T> last_hidden;  // [D], after the final norm
  Tensor<T> logits_last;  // [vocab]
};

/// Parallel pass over a non-empty prompt into an empty cache.
template <typename T>
PrefillResult<T> forward_prefill(const Weights<T>& w, std::span<const std::int32_t> tokens, KVCache<T>& cache);

/// One token at `position`, which must equal cache.filled_len(). Returns
/// logits [vocab].
template <typename T>
Tensor<T> decode_step(const Weights<T>& w, std::int32_t token, KVCache<T>& cache, std::size_t position);

// ---- differentiable path -------------------------------------------------

/// Tape handles for every tensor of a Weights, in for_each_param order.
struct ParamVars {
  Var token_embedding;
  struct Layer {
    Var attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
  };
  std::vector<Layer> layers;
  Var final_norm;
  Var lm_head;
  std::vector<Var> all;
};

/// Puts w's tensors on the tape, as trainable leaves or constants.
template <typename T>
ParamVars bind_weights(Tape<T>& tape, const Weights<T>& w, bool trainable);

/// A run of packed rows that continues a (possibly empty) constant cache.
template <typename T>
struct PackedSegment {
  std::size_t offset = 0;
  std::size_t length = 0;
  const KVCache<T>* prefix = nullptr;
};

template <typename T>
struct PackedTokens {
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> positions;
  std::vector<PackedSegment<T>> segments;

  /// Appends one segment; its positions continue from the prefix length.
  void add_segment(std::span<const std::int32_t> tokens, const KVCache<T>* prefix);
};

/// Differentiable teacher-forced pass. Returns logits [n x vocab]. Prefix
/// caches are constants: no gradient flows into them.
template <typename T>
Var forward_train(Tape<T>& tape, const Weights<T>& w, const ParamVars& vars, const PackedTokens<T>& batch);

}  // namespace overfill
