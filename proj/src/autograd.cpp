#include "overfill/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace overfill {

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::constant_view(const Tensor<T>& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::parameter(const Tensor<T>& value) {
  Node n;
  n.ref = &value;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  for (Var in : inputs) n.requires_grad = n.requires_grad || requires_grad(in);
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("variable is not on this tape");
  return nodes_[v.id];
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.owned;
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
std::vector<Tensor<T>> Tape<T>::gradients(Var loss, std::span<const Var> params) const {
  const Tensor<T>& loss_value = value(loss);
  if (loss_value.size() != 1) {
    throw std::invalid_argument("gradient needs a scalar loss, got shape " + to_string(loss_value.shape()));
  }
  std::vector<bool> keep(nodes_.size(), false);
  for (Var p : params) {
    if (!requires_grad(p) || nodes_[p.id].backward) {
      throw std::invalid_argument("variable " + std::to_string(p.id) + " is not a trainable leaf");
    }
    keep[p.id] = true;
  }

  std::vector<Tensor<T>> grads(nodes_.size());
  if (requires_grad(loss)) {
    grads[loss.id] = Tensor<T>(loss_value.shape(), T{1});
    std::vector<Tensor<T>*> slots;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (grads[i].empty() || !n.backward) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t j = 0; j < n.inputs.size(); ++j) {
        const Var in = n.inputs[j];
        if (!requires_grad(in)) continue;
        if (grads[in.id].empty()) grads[in.id] = Tensor<T>(value(in).shape(), T{0});
        slots[j] = &grads[in.id];
      }
      n.backward(*this, grads[i], slots);
      if (!keep[i]) grads[i] = Tensor<T>();
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (Var p : params) {
    out.push_back(grads[p.id].empty() ? Tensor<T>(value(p).shape(), T{0}) : grads[p.id]);
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

namespace ad {

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = kernels::matmul(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [a, b](const Tape<T>& t, const Tensor<T>& g, auto grads) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.dim(1);
    if (grads[0]) {
      const Tensor<T> bt = kernels::transpose(bv);
      kernels::gemm_acc(m, k, n, g.data(), bt.data(), grads[0]->data());
    }
    if (grads[1]) kernels::gemm_tn_acc(m, n, k, av.data(), g.data(), grads[1]->data());
  });
}

template <typename T>
Var matmul_bt(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = kernels::matmul_bt(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [a, b](const Tape<T>& t, const Tensor<T>& g, auto grads) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.dim(0);
    if (grads[0]) kernels::gemm_acc(m, k, n, g.data(), bv.data(), grads[0]->data());
    if (grads[1]) kernels::gemm_tn_acc(m, k, n, g.data(), av.data(), grads[1]->data());
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = kernels::add(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [](const Tape<T>&, const Tensor<T>& g, auto grads) {
    for (Tensor<T>* gi : grads) {
      if (!gi) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T s = 0;
  for (T v : tape.value(x).values()) s += v;
  return tape.record(Tensor<T>({1}, s), {x}, [](const Tape<T>&, const Tensor<T>& g, auto grads) {
    for (T& v : grads[0]->values()) v += g[0];
  });
}

template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const std::int32_t> ids) {
  const Tensor<T>& tv = tape.value(table);
  const std::size_t vocab = tv.dim(0), d = tv.cols();
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return tape.record(std::move(out), {table},
                     [saved = std::move(saved), d](const Tape<T>&, const Tensor<T>& g, auto grads) {
                       T* gt = grads[0]->data();
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         T* dst = gt + static_cast<std::size_t>(saved[i]) * d;
                         const T* src = g.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                     });
}

template <typename T>
Var rms_norm(Tape<T>& tape, Var x, Var gamma, T eps) {
  Tensor<T> out = kernels::rms_norm(tape.value(x), tape.value(gamma), eps);
  return tape.record(std::move(out), {x, gamma}, [x, gamma, eps](const Tape<T>& t, const Tensor<T>& g, auto grads) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& gv = t.value(gamma);
    const std::size_t d = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      const T* in = xv.data() + r * d;
      const T* dy = g.data() + r * d;
      T ss = 0;
      for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
      const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
      if (grads[1]) {
        T* dg = grads[1]->data();
        for (std::size_t j = 0; j < d; ++j) dg[j] += dy[j] * in[j] * inv;
      }
      if (grads[0]) {
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += dy[j] * gv[j] * in[j];
        const T coeff = inv * inv * inv * dot / static_cast<T>(d);
        T* dx = grads[0]->data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dx[j] += inv * gv[j] * dy[j] - in[j] * coeff;
      }
    }
  });
}

template <typename T>
Var rope(Tape<T>& tape, Var x, std::span<const std::size_t> positions, std::size_t head_dim, double theta_base) {
  Tensor<T> out = tape.value(x);
  const std::size_t width = out.cols();
  kernels::rope_rows_inplace<T>(out.values(), width, head_dim, positions, theta_base);
  std::vector<std::size_t> saved(positions.begin(), positions.end());
  return tape.record(std::move(out), {x},
                     [saved = std::move(saved), width, head_dim, theta_base](const Tape<T>&, const Tensor<T>& g,
                                                                             auto grads) {
                       Tensor<T> back = g;
                       kernels::rope_rows_inplace<T>(back.values(), width, head_dim, saved, theta_base, true);
                       for (std::size_t i = 0; i < back.size(); ++i) (*grads[0])[i] += back[i];
                     });
}

template <typename T>
Var swiglu(Tape<T>& tape, Var gate, Var up) {
  Tensor<T> out = kernels::swiglu(tape.value(gate), tape.value(up));
  return tape.record(std::move(out), {gate, up}, [gate, up](const Tape<T>& t, const Tensor<T>& g, auto grads) {
    const Tensor<T>& gv = t.value(gate);
    const Tensor<T>& uv = t.value(up);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T sig = T{1} / (T{1} + std::exp(-gv[i]));
      if (grads[0]) (*grads[0])[i] += g[i] * uv[i] * (sig + gv[i] * sig * (T{1} - sig));
      if (grads[1]) (*grads[1])[i] += g[i] * gv[i] * sig;
    }
  });
}

template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
  Tensor<T> out = kernels::softmax_rows(tape.value(x));
  Tensor<T> saved = out;
  return tape.record(std::move(out), {x}, [y = std::move(saved)](const Tape<T>&, const Tensor<T>& g, auto grads) {
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const T* yr = y.data() + r * n;
      const T* gr = g.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      T* dx = grads[0]->data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::span<const AttentionSegment<T>> segments,
                     const kernels::AttentionGeometry& geo) {
  const Tensor<T>& qv = tape.value(q);
  const Tensor<T>& kv = tape.value(k);
  const Tensor<T>& vv = tape.value(v);
  const std::size_t q_width = geo.n_heads * geo.head_dim;
  const std::size_t kv_width = geo.n_kv_heads * geo.head_dim;
  if (geo.n_kv_heads == 0 || geo.n_heads % geo.n_kv_heads != 0 || qv.cols() != q_width || kv.cols() != kv_width ||
      vv.shape() != kv.shape() || qv.rows() != kv.rows()) {
    throw DimensionError("attention shape mismatch: q " + to_string(qv.shape()) + ", k " + to_string(kv.shape()) +
                         ", v " + to_string(vv.shape()));
  }
  const std::size_t n = qv.rows();
  Tensor<T> out({n, q_width});
  // probs[r] holds [n_heads x context] for packed row r.
  std::vector<std::vector<T>> probs(n);
  std::vector<AttentionSegment<T>> segs(segments.begin(), segments.end());
  for (const auto& s : segs) {
    if (s.offset + s.length > n) throw DimensionError("attention segment exceeds packed rows");
    kernels::KeyValueSource<T> src{s.prefix_k, s.prefix_v, s.prefix_len, kv.data() + s.offset * kv_width,
                                   vv.data() + s.offset * kv_width, kv_width};
    for (std::size_t i = 0; i < s.length; ++i) {
      const std::size_t r = s.offset + i;
      const std::size_t context = s.prefix_len + i + 1;
      probs[r].resize(geo.n_heads * context);
      kernels::attend_row(qv.data() + r * q_width, src, context, geo, out.data() + r * q_width, probs[r].data());
    }
  }
  return tape.record(
      std::move(out), {q, k, v},
      [q, k, v, geo, segs = std::move(segs), probs = std::move(probs)](const Tape<T>& t, const Tensor<T>& g,
                                                                       auto grads) {
        const Tensor<T>& qv = t.value(q);
        const Tensor<T>& kv = t.value(k);
        const Tensor<T>& vv = t.value(v);
        const std::size_t d = geo.head_dim;
        const std::size_t group = geo.n_heads / geo.n_kv_heads;
        const std::size_t q_width = geo.n_heads * d;
        const std::size_t kv_width = geo.n_kv_heads * d;
        const T scale = T{1} / std::sqrt(static_cast<T>(d));
        std::vector<T> ds;
        for (const auto& s : segs) {
          kernels::KeyValueSource<T> src{s.prefix_k, s.prefix_v, s.prefix_len, kv.data() + s.offset * kv_width,
                                         vv.data() + s.offset * kv_width, kv_width};
          for (std::size_t i = 0; i < s.length; ++i) {
            const std::size_t r = s.offset + i;
            const std::size_t context = s.prefix_len + i + 1;
            ds.resize(context);
            for (std::size_t h = 0; h < geo.n_heads; ++h) {
              const std::size_t kv_off = (h / group) * d;
              const T* p = probs[r].data() + h * context;
              const T* dout = g.data() + r * q_width + h * d;
              T dot = 0;
              for (std::size_t j = 0; j < context; ++j) {
                const T* vj = src.value(j) + kv_off;
                T dp = 0;
                for (std::size_t c = 0; c < d; ++c) dp += dout[c] * vj[c];
                ds[j] = dp;
                dot += p[j] * dp;
              }
              for (std::size_t j = 0; j < context; ++j) ds[j] = p[j] * (ds[j] - dot) * scale;
              if (grads[0]) {
                T* dq = grads[0]->data() + r * q_width + h * d;
                for (std::size_t j = 0; j < context; ++j) {
                  const T* kj = src.key(j) + kv_off;
                  for (std::size_t c = 0; c < d; ++c) dq[c] += ds[j] * kj[c];
                }
              }
              const T* qh = qv.data() + r * q_width + h * d;
              for (std::size_t j = s.prefix_len; j < context; ++j) {
                const std::size_t row = s.offset + (j - s.prefix_len);
                if (grads[1]) {
                  T* dk = grads[1]->data() + row * kv_width + kv_off;
                  for (std::size_t c = 0; c < d; ++c) dk[c] += ds[j] * qh[c];
                }
                if (grads[2]) {
                  T* dv = grads[2]->data() + row * kv_width + kv_off;
                  for (std::size_t c = 0; c < d; ++c) dv[c] += p[j] * dout[c];
                }
              }
            }
          }
        }
      });
}

namespace {

template <typename T>
std::size_t count_mask(std::size_t rows, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross entropy expects " + std::to_string(rows) + " targets and mask entries, got " +
                         std::to_string(targets.size()) + " and " + std::to_string(mask.size()));
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw std::invalid_argument("loss mask selects no positions");
  return count;
}

// -log softmax(row)[target], with the normalizer computed after max subtraction.
template <typename T>
T row_nll(const T* row, std::size_t n, std::int32_t target) {
  if (target < 0 || static_cast<std::size_t>(target) >= n) {
    throw std::out_of_range("target id " + std::to_string(target) + " outside vocabulary of " + std::to_string(n));
  }
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
  return std::log(sum) + mx - row[target];
}

}  // namespace

template <typename T>
Var masked_cross_entropy(Tape<T>& tape, Var logits, std::span<const std::int32_t> targets,
                         std::span<const std::uint8_t> mask) {
  const T loss = overfill::masked_cross_entropy(tape.value(logits), targets, mask);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return tape.record(
      Tensor<T>({1}, loss), {logits},
      [logits, tg = std::move(tg), mk = std::move(mk)](const Tape<T>& t, const Tensor<T>& g, auto grads) {
        const Tensor<T>& lv = t.value(logits);
        const std::size_t n = lv.cols();
        const std::size_t count = count_mask<T>(lv.rows(), tg, mk);
        const T scale = g[0] / static_cast<T>(count);
        for (std::size_t r = 0; r < lv.rows(); ++r) {
          if (!mk[r]) continue;
          const T* row = lv.data() + r * n;
          T mx = row[0];
          for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
          T sum = 0;
          for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
          T* dl = grads[0]->data() + r * n;
          for (std::size_t j = 0; j < n; ++j) dl[j] += scale * std::exp(row[j] - mx) / sum;
          dl[tg[r]] -= scale;
        }
      });
}

#define OVERFILL_INSTANTIATE(T)                                                                                \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                                 \
  template Var matmul_bt<T>(Tape<T>&, Var, Var);                                                              \
  template Var add<T>(Tape<T>&, Var, Var);                                                                    \
  template Var sum<T>(Tape<T>&, Var);                                                                         \
  template Var embedding<T>(Tape<T>&, Var, std::span<const std::int32_t>);                                    \
  template Var rms_norm<T>(Tape<T>&, Var, Var, T);                                                            \
  template Var rope<T>(Tape<T>&, Var, std::span<const std::size_t>, std::size_t, double);                     \
  template Var swiglu<T>(Tape<T>&, Var, Var);                                                                 \
  template Var softmax_rows<T>(Tape<T>&, Var);                                                                \
  template Var causal_attention<T>(Tape<T>&, Var, Var, Var, std::span<const AttentionSegment<T>>,             \
                                   const kernels::AttentionGeometry&);                                        \
  template Var masked_cross_entropy<T>(Tape<T>&, Var, std::span<const std::int32_t>, std::span<const std::uint8_t>);

OVERFILL_INSTANTIATE(float)
OVERFILL_INSTANTIATE(double)
#undef OVERFILL_INSTANTIATE

}  // namespace ad

template <typename T>
T masked_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                       std::span<const std::uint8_t> mask) {
  const std::size_t count = ad::count_mask<T>(logits.rows(), targets, mask);
  const std::size_t n = logits.cols();
  T total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (mask[r]) total += ad::row_nll(logits.data() + r * n, n, targets[r]);
  }
  return total / static_cast<T>(count);
}

template float masked_cross_entropy(const Tensor<float>&, std::span<const std::int32_t>,
                                    std::span<const std::uint8_t>);
template double masked_cross_entropy(const Tensor<double>&, std::span<const std::int32_t>,
                                     std::span<const std::uint8_t>);

}  // namespace overfill
