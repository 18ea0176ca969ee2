#pragma once

// Forward numeric kernels shared by the inference path and the autograd ops.
// Every reduction runs in a fixed left-to-right order so results are
// bit-reproducible and independent of how many rows are processed at once.

#include <cstddef>
#include <span>

#include "overfill/tensor.hpp"

namespace overfill::kernels {

// c[m x n] += a[m x k] * b[k x n]. The sum for each output element runs over
// k in ascending order, so a row's result does not depend on m.
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);

// c[k x n] += a^T * b with a[m x k], b[m x n]; sums over m ascending.
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// a viewed as [rows x k] times b[k x n]; the result keeps a's leading dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a[rows x k] times the transpose of b[n x k].
template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Row-wise softmax over the last dimension with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// x / sqrt(mean(x^2) + eps) * gamma, per row of the last dimension.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, T eps);

/// Rotates consecutive pairs (2i, 2i+1) of every head by
/// position * theta_base^(-2i / head_dim). `inverse` rotates backwards.
/// x holds `positions.size()` rows of `width` values, width a multiple of
/// head_dim.
template <typename T>
void rope_rows_inplace(std::span<T> x, std::size_t width, std::size_t head_dim,
                       std::span<const std::size_t> positions, double theta_base, bool inverse = false);

/// Rotary embedding of one token's heads, x shaped [heads x head_dim].
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::size_t position, double theta_base);

template <typename T>
T silu(T x);

/// silu(gate) * up, elementwise.
template <typename T>
Tensor<T> swiglu(const Tensor<T>& gate, const Tensor<T>& up);

/// Where a causal attention step reads its keys and values: first
/// `prefix_len` rows from the prefix (usually a KV cache), then rows from
/// `local`. Both sources use a row stride of `stride` values.
template <typename T>
struct KeyValueSource {
  const T* prefix_k = nullptr;
  const T* prefix_v = nullptr;
  std::size_t prefix_len = 0;
  const T* local_k = nullptr;
  const T* local_v = nullptr;
  std::size_t stride = 0;

  const T* key(std::size_t j) const { return j < prefix_len ? prefix_k + j * stride : local_k + (j - prefix_len) * stride; }
  const T* value(std::size_t j) const {
    return j < prefix_len ? prefix_v + j * stride : local_v + (j - prefix_len) * stride;
  }
};

struct AttentionGeometry {
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t head_dim = 0;
};

/// One query row attending over the first `context` positions of `src`.
/// Query head h reads kv head h / (n_heads / n_kv_heads). When `probs` is
/// non-null it receives the attention weights, [n_heads x context].
template <typename T>
void attend_row(const T* q_row, const KeyValueSource<T>& src, std::size_t context, const AttentionGeometry& geo,
                T* out_row, T* probs = nullptr);

}  // namespace overfill::kernels
