#include "overfill/engine.hpp"

#include <cmath>
#include <stdexcept>

namespace overfill {

std::string_view mode_name(GenMode mode) {
  switch (mode) {
    case GenMode::full: return "full";
    case GenMode::pruned: return "pruned";
    case GenMode::overfill: return "overfill";
  }
  return "unknown";
}

GenMode parse_mode(std::string_view name) {
  for (GenMode m : {GenMode::full, GenMode::pruned, GenMode::overfill}) {
    if (mode_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown generation mode '" + std::string(name) + "'");
}

template <typename T>
std::int32_t sample(std::span<const T> logits, double temperature, CounterRng& rng) {
  if (logits.empty()) throw std::invalid_argument("cannot sample from empty logits");
  if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be non-negative");
  for (T v : logits) {
    if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("logits must be finite");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  if (temperature == 0.0) return static_cast<std::int32_t>(best);

  const double top = static_cast<double>(logits[best]);
  std::vector<double> weights(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    weights[i] = std::exp((static_cast<double>(logits[i]) - top) / temperature);
    total += weights[i];
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<std::int32_t>(i);
  }
  return static_cast<std::int32_t>(best);
}

namespace {

template <typename T>
void check_prompt(std::span<const std::int32_t> prompt, std::size_t min_len, const GenParams& params,
                  std::int32_t vocab) {
  if (prompt.size() < min_len) {
    throw std::invalid_argument("prompt needs at least " + std::to_string(min_len) + " tokens, got " +
                                std::to_string(prompt.size()));
  }
  if (!(params.temperature >= 0.0)) throw std::invalid_argument("temperature must be non-negative");
  if (params.stop_token < 0 || params.stop_token >= vocab) {
    throw std::invalid_argument("stop token " + std::to_string(params.stop_token) + " outside the vocabulary");
  }
}

// Samples from `logits`, then keeps feeding the decoder until a stop token or
// the budget runs out.
template <typename T>
void decode_loop(const Weights<T>& w, Tensor<T> logits, GenResult<T>& out, const GenParams& params, CounterRng& rng,
                 std::size_t& calls) {
  while (out.tokens.size() < params.max_new_tokens) {
    const std::int32_t tok = sample<T>(logits.values(), params.temperature, rng);
    out.tokens.push_back(tok);
    if (tok == params.stop_token || out.tokens.size() == params.max_new_tokens) break;
    logits = decode_step(w, tok, out.cache, out.cache.filled_len());
    ++calls;
  }
}

}  // namespace

template <typename T>
GenResult<T> overfill_generate(const Weights<T>& full_w, const Weights<T>& pruned_w,
                               std::span<const std::int32_t> prompt, const GenParams& params) {
  if (cache_shape(full_w.config) != cache_shape(pruned_w.config)) {
    throw DimensionError("full and pruned models disagree on cache geometry");
  }
  if (full_w.config.vocab_size != pruned_w.config.vocab_size) {
    throw DimensionError("full and pruned models disagree on vocabulary size");
  }
  check_prompt<T>(prompt, 2, params, static_cast<std::int32_t>(full_w.config.vocab_size));

  GenResult<T> out{{}, {}, KVCache<T>(cache_shape(full_w.config))};
  CounterRng rng(params.seed, 0);
  const std::size_t m = prompt.size();

  if (params.first_token_from_full) {
    // The full model reads the whole prompt; the pruned model takes over at y_1.
    auto pre = forward_prefill(full_w, prompt, out.cache);
    ++out.stats.full_calls;
    decode_loop(pruned_w, std::move(pre.logits_last), out, params, rng, out.stats.pruned_calls);
    return out;
  }

  forward_prefill(full_w, prompt.first(m - 1), out.cache);
  ++out.stats.full_calls;
  Tensor<T> logits = decode_step(pruned_w, prompt[m - 1], out.cache, m - 1);
  ++out.stats.pruned_calls;
  decode_loop(pruned_w, std::move(logits), out, params, rng, out.stats.pruned_calls);
  return out;
}

template <typename T>
GenResult<T> baseline_generate(const Weights<T>& w, std::span<const std::int32_t> prompt, const GenParams& params) {
  check_prompt<T>(prompt, 1, params, static_cast<std::int32_t>(w.config.vocab_size));
  GenResult<T> out{{}, {}, KVCache<T>(cache_shape(w.config))};
  CounterRng rng(params.seed, 0);
  auto pre = forward_prefill(w, prompt, out.cache);
  out.stats.full_calls = 1;
  decode_loop(w, std::move(pre.logits_last), out, params, rng, out.stats.full_calls);
  return out;
}

std::string decode_answer(std::span<const std::int32_t> tokens, std::int32_t stop_token) {
  if (!tokens.empty() && tokens.back() == stop_token) tokens = tokens.first(tokens.size() - 1);
  std::string out;
  for (std::int32_t t : tokens) out.push_back(t >= 0 && t < 256 ? static_cast<char>(t) : '?');
  return out;
}

template std::int32_t sample<float>(std::span<const float>, double, CounterRng&);
template std::int32_t sample<double>(std::span<const double>, double, CounterRng&);
template GenResult<float> overfill_generate<float>(const Weights<float>&, const Weights<float>&,
                                                   std::span<const std::int32_t>, const GenParams&);
template GenResult<double> overfill_generate<double>(const Weights<double>&, const Weights<double>&,
                                                     std::span<const std::int32_t>, const GenParams&);
template GenResult<float> baseline_generate<float>(const Weights<float>&, std::span<const std::int32_t>,
                                                   const GenParams&);
template GenResult<double> baseline_generate<double>(const Weights<double>&, std::span<const std::int32_t>,
                                                     const GenParams&);

}  // namespace overfill
