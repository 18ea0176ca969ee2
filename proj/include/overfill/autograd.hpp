#pragma once

// Minimal reverse-mode differentiation. A Tape records every executed op in
// order; gradients() replays it backwards once, visiting each node at most
// once. Ops are coarse (a whole matmul, a whole attention layer) so a
// training step records a few hundred nodes.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "overfill/kernels.hpp"
#include "overfill/tensor.hpp"

namespace overfill {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

template <typename T>
class Tape {
 public:
  // Receives the gradient of the node's output and one pointer per input;
  // the pointer is null when that input does not need a gradient.
  using BackwardFn = std::function<void(const Tape&, const Tensor<T>& out_grad, std::span<Tensor<T>* const> in_grads)>;

  Var constant(Tensor<T> value);
  /// Leaf referencing caller-owned storage; it must outlive the tape.
  Var constant_view(const Tensor<T>& value);
  /// Trainable leaf referencing caller-owned storage.
  Var parameter(const Tensor<T>& value);

  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the scalar `loss` with respect to each of `params`.
  /// Throws if loss is not a single element or a param is not trainable.
  std::vector<Tensor<T>> gradients(Var loss, std::span<const Var> params) const;

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    bool requires_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
  };
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

template <typename T>
std::vector<Tensor<T>> grad_of(Var loss, const Tape<T>& tape, std::span<const Var> params) {
  return tape.gradients(loss, params);
}

/// One contiguous run of packed query rows and the constant cache rows it
/// may additionally attend to. Cache rows never receive gradient.
template <typename T>
struct AttentionSegment {
  std::size_t offset = 0;
  std::size_t length = 0;
  const T* prefix_k = nullptr;
  const T* prefix_v = nullptr;
  std::size_t prefix_len = 0;
};

namespace ad {

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);
/// a times the transpose of b.
template <typename T>
Var matmul_bt(Tape<T>& tape, Var a, Var b);
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var sum(Tape<T>& tape, Var x);
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const std::int32_t> ids);
template <typename T>
Var rms_norm(Tape<T>& tape, Var x, Var gamma, T eps);
template <typename T>
Var rope(Tape<T>& tape, Var x, std::span<const std::size_t> positions, std::size_t head_dim, double theta_base);
template <typename T>
Var swiglu(Tape<T>& tape, Var gate, Var up);
template <typename T>
Var softmax_rows(Tape<T>& tape, Var x);

/// Causal grouped-query attention over packed rows. q is [n x H*d],
/// k and v are [n x Hkv*d]. Within a segment, row i sees the segment's
/// prefix rows followed by segment rows 0..i.
template <typename T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::span<const AttentionSegment<T>> segments,
                     const kernels::AttentionGeometry& geo);

/// Mean over rows with mask set of -log softmax(logits[row])[target[row]].
template <typename T>
Var masked_cross_entropy(Tape<T>& tape, Var logits, std::span<const std::int32_t> targets,
                         std::span<const std::uint8_t> mask);

}  // namespace ad

/// Forward-only masked cross entropy, the same arithmetic as the tape op.
template <typename T>
T masked_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                       std::span<const std::uint8_t> mask);

}  // namespace overfill
