#pragma once

// Generation. In overfill mode the full model prefills x_1..x_{M-1}, then the
// pruned model reads x_M and decodes every output token on the same cache.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "overfill/corpus.hpp"
#include "overfill/model.hpp"
#include "overfill/rng.hpp"

namespace overfill {

struct GenParams {
  std::size_t max_new_tokens = 64;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::int32_t stop_token = Tokenizer::kEos;
  /// Let the full model emit y_1 from its prefill logits instead of handing
  /// x_M to the pruned model.
  bool first_token_from_full = false;

  bool operator==(const GenParams&) const = default;
};

enum class GenMode { full, pruned, overfill };

std::string_view mode_name(GenMode mode);
GenMode parse_mode(std::string_view name);

struct GenStats {
  std::size_t full_calls = 0;    // forward passes through the full weights
  std::size_t pruned_calls = 0;  // forward passes through the pruned weights
};

template <typename T>
struct GenResult {
  std::vector<std::int32_t> tokens;  // includes the stop token if reached
  GenStats stats;
  KVCache<T> cache;
};

/// Greedy (temperature 0, lowest index on ties) or categorical sampling over
/// softmax(logits / temperature), drawing from `rng`.
template <typename T>
std::int32_t sample(std::span<const T> logits, double temperature, CounterRng& rng);

template <typename T>
GenResult<T> overfill_generate(const Weights<T>& full_w, const Weights<T>& pruned_w,
                               std::span<const std::int32_t> prompt, const GenParams& params);

template <typename T>
GenResult<T> baseline_generate(const Weights<T>& w, std::span<const std::int32_t> prompt, const GenParams& params);

/// Output tokens with a trailing stop token removed, decoded to text.
/// Non-byte tokens elsewhere are rendered as '?'.
std::string decode_answer(std::span<const std::int32_t> tokens, std::int32_t stop_token);

}  // namespace overfill
