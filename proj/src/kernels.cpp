#include "overfill/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace overfill::kernels {

namespace {

// c[i][j] += sum_p A(i, p) * b[p * ldb + j], where A(i, p) = a[i * ars + p * acs].
// Every output element accumulates over p in ascending order starting from its
// current value, whatever the tiling, so results do not depend on m.
template <typename T, std::size_t MR, std::size_t NR>
void gemm_tile(std::size_t i0, std::size_t j0, std::size_t k, const T* a, std::size_t ars, std::size_t acs, const T* b,
               std::size_t ldb, T* c, std::size_t ldc) {
  T acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) acc[r][j] = c[(i0 + r) * ldc + j0 + j];
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb + j0;
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[(i0 + r) * ars + p * acs];
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) c[(i0 + r) * ldc + j0 + j] = acc[r][j];
}

template <typename T>
void gemm_edge(std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1, std::size_t k, const T* a,
               std::size_t ars, std::size_t acs, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t i = i0; i < i1; ++i)
    for (std::size_t j = j0; j < j1; ++j) {
      T acc = c[i * ldc + j];
      for (std::size_t p = 0; p < k; ++p) acc += a[i * ars + p * acs] * b[p * ldb + j];
      c[i * ldc + j] = acc;
    }
}

template <typename T>
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t ars, std::size_t acs,
                  const T* b, T* c) {
  constexpr std::size_t MR = 8;
  constexpr std::size_t NR = 64 / sizeof(T) * 2;  // two cache lines of output per row
  constexpr std::size_t KC = 128;  // keeps a panel of b cache-resident
  const std::size_t m_full = m - m % MR, n_full = n - n % NR;
  // Splitting k into panels keeps each element's addition order unchanged.
  for (std::size_t p0 = 0; p0 < k; p0 += KC) {
    const std::size_t kc = std::min(KC, k - p0);
    const T* ap = a + p0 * acs;
    const T* bp = b + p0 * n;
    for (std::size_t i = 0; i < m_full; i += MR) {
      for (std::size_t j = 0; j < n_full; j += NR) gemm_tile<T, MR, NR>(i, j, kc, ap, ars, acs, bp, n, c, n);
    }
    if (n_full < n) gemm_edge(0, m_full, n_full, n, kc, ap, ars, acs, bp, n, c, n);
    if (m_full < m) gemm_edge(m_full, m, 0, n, kc, ap, ars, acs, bp, n, c, n);
  }
}

}  // namespace

template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm_strided(m, n, k, a, k, 1, b, c);
}

template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  // c[p][j] += sum_i a[i][p] b[i][j]: a gemm over the transposed view of a.
  gemm_strided(k, n, m, a, 1, k, b, c);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty() || b.rank() != 2 || a.cols() != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = b.dim(1);
  Tensor<T> out(std::move(out_shape));
  gemm_acc(a.rows(), b.dim(1), a.cols(), a.data(), b.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty() || b.rank() != 2 || a.cols() != b.dim(1)) {
    throw DimensionError("matmul_bt shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()) +
                         "^T");
  }
  return matmul(a, transpose(b));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + to_string(a.shape()) + " + " + to_string(b.shape()));
  }
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T* row = out.data() + r * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, T eps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d) {
    throw DimensionError("rms_norm gamma " + to_string(gamma.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* in = x.data() + r * d;
    T* o = out.data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) o[j] = in[j] * inv * gamma[j];
  }
  return out;
}

template <typename T>
void rope_rows_inplace(std::span<T> x, std::size_t width, std::size_t head_dim,
                       std::span<const std::size_t> positions, double theta_base, bool inverse) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw DimensionError("rope needs an even head dimension, got " + std::to_string(head_dim));
  }
  if (width % head_dim != 0 || x.size() != positions.size() * width) {
    throw DimensionError("rope input of " + std::to_string(x.size()) + " values does not match " +
                         std::to_string(positions.size()) + " rows of width " + std::to_string(width));
  }
  const std::size_t half = head_dim / 2;
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const double pos = static_cast<double>(positions[r]);
    T* row = x.data() + r * width;
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = pos * freq;
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      for (std::size_t h = 0; h < width; h += head_dim) {
        T& a = row[h + 2 * i];
        T& b = row[h + 2 * i + 1];
        const T a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::size_t position, double theta_base) {
  if (x.rank() != 2) throw DimensionError("rope_apply expects [heads x head_dim], got " + to_string(x.shape()));
  Tensor<T> out = x;
  const std::size_t heads = x.dim(0), head_dim = x.dim(1);
  std::vector<std::size_t> positions(1, position);
  rope_rows_inplace<T>(out.values(), heads * head_dim, head_dim, positions, theta_base);
  return out;
}

template <typename T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
Tensor<T> swiglu(const Tensor<T>& gate, const Tensor<T>& up) {
  if (gate.shape() != up.shape()) {
    throw DimensionError("swiglu shape mismatch: " + to_string(gate.shape()) + " vs " + to_string(up.shape()));
  }
  Tensor<T> out(gate.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = silu(gate[i]) * up[i];
  return out;
}

template <typename T>
void attend_row(const T* q_row, const KeyValueSource<T>& src, std::size_t context, const AttentionGeometry& geo,
                T* out_row, T* probs) {
  const std::size_t d = geo.head_dim;
  const std::size_t group = geo.n_heads / geo.n_kv_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<T> local_probs;
  if (probs == nullptr) {
    local_probs.resize(geo.n_heads * context);
    probs = local_probs.data();
  }
  for (std::size_t h = 0; h < geo.n_heads; ++h) {
    const T* q = q_row + h * d;
    const std::size_t kv_off = (h / group) * d;
    T* p = probs + h * context;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < context; ++j) {
      const T* k = src.key(j) + kv_off;
      T s = 0;
      for (std::size_t t = 0; t < d; ++t) s += q[t] * k[t];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < context; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const T inv = T{1} / sum;
    T* o = out_row + h * d;
    std::fill(o, o + d, T{0});
    for (std::size_t j = 0; j < context; ++j) {
      p[j] *= inv;
      const T* v = src.value(j) + kv_off;
      for (std::size_t t = 0; t < d; ++t) o[t] += p[j] * v[t];
    }
  }
}

#define OVERFILL_INSTANTIATE(T)                                                                         \
  template void gemm_acc<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);            \
  template void gemm_tn_acc<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*);         \
  template Tensor<T> transpose(const Tensor<T>&);                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> matmul_bt(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                   \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                                  \
  template void rope_rows_inplace<T>(std::span<T>, std::size_t, std::size_t, std::span<const std::size_t>, \
                                     double, bool);                                                    \
  template Tensor<T> rope_apply(const Tensor<T>&, std::size_t, double);                                \
  template T silu(T);                                                                                  \
  template Tensor<T> swiglu(const Tensor<T>&, const Tensor<T>&);                                       \
  template void attend_row<T>(const T*, const KeyValueSource<T>&, std::size_t, const AttentionGeometry&, T*, T*);

OVERFILL_INSTANTIATE(float)
OVERFILL_INSTANTIATE(double)

#undef OVERFILL_INSTANTIATE

}  // namespace overfill::kernels
