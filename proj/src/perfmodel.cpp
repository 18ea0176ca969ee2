#include "overfill/perfmodel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <stdexcept>

#include "overfill/rng.hpp"

namespace overfill {

std::size_t param_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.hidden_dim;
  const std::size_t attn = d * c.attn_dim() + 2 * d * c.kv_dim() + c.attn_dim() * d;
  const std::size_t ffn = 3 * d * c.intermediate_dim;
  const std::size_t norms = 2 * d;
  const std::size_t embed = c.vocab_size * d * (c.tied_embeddings ? 1 : 2);
  return embed + c.n_layers * (attn + ffn + norms) + d;
}

void HardwareSpec::validate() const {
  if (!(peak_flops > 0) || !(mem_bandwidth > 0) || !(bytes_per_param > 0)) {
    throw std::invalid_argument("hardware figures must be positive");
  }
}

namespace {

// QK^T and AV for one query against `context` keys, all layers.
double attention_flops(const ModelConfig& c, double context) {
  return 4.0 * static_cast<double>(c.n_layers * c.attn_dim()) * context;
}

double cache_bytes(const ModelConfig& c, double context, double bytes_per_value) {
  return 2.0 * static_cast<double>(c.n_layers * c.kv_dim()) * context * bytes_per_value;
}

}  // namespace

CostReport roofline_estimate(const HardwareSpec& hw, const ModelConfig& full, const ModelConfig& pruned,
                             std::size_t prompt_len, std::size_t new_tokens, std::size_t batch, GenMode mode,
                             const RooflineOptions& options) {
  hw.validate();
  if (prompt_len == 0 || batch == 0) throw std::invalid_argument("prompt length and batch must be positive");
  const ModelConfig& pre_cfg = mode == GenMode::pruned ? pruned : full;
  const ModelConfig& dec_cfg = mode == GenMode::full ? full : pruned;
  const double p_pre = static_cast<double>(param_count(pre_cfg));
  const double p_dec = static_cast<double>(param_count(dec_cfg));
  const double m = static_cast<double>(prompt_len), b = static_cast<double>(batch);

  CostReport r;
  r.mode = mode;
  r.prompt_len = prompt_len;
  r.new_tokens = new_tokens;
  r.batch = batch;
  r.params = param_count(dec_cfg);

  double prefill_flops = 2.0 * p_pre * m * b;
  // Causal prefill: token t attends to t keys, summing to M (M + 1) / 2.
  if (options.attention_terms) prefill_flops += attention_flops(pre_cfg, m * (m + 1) / 2) * b;
  r.prefill_s = prefill_flops / hw.peak_flops;

  const double weight_bytes = p_dec * hw.bytes_per_param;
  for (std::size_t n = 0; n < new_tokens; ++n) {
    const double context = m + static_cast<double>(n) + 1;
    double flops = 2.0 * p_dec * b;
    double bytes = weight_bytes;
    if (options.attention_terms) {
      flops += attention_flops(dec_cfg, context) * b;
      bytes += cache_bytes(dec_cfg, context, hw.bytes_per_param) * b;
    }
    r.decode_s += std::max(bytes / hw.mem_bandwidth, flops / hw.peak_flops);
  }
  r.total_s = r.prefill_s + r.decode_s;
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct PhaseTimes {
  double prefill = 0;
  double decode = 0;
};

std::int32_t argmax(const Tensor<float>& logits) {
  return static_cast<std::int32_t>(std::max_element(logits.data(), logits.data() + logits.size()) - logits.data());
}

PhaseTimes run_once(const Weights<float>& full_w, const Weights<float>& pruned_w,
                    const std::vector<std::vector<std::int32_t>>& prompts, std::size_t new_tokens, GenMode mode) {
  PhaseTimes t;
  const Weights<float>& dec_w = mode == GenMode::full ? full_w : pruned_w;
  for (const auto& prompt : prompts) {
    KVCache<float> cache(cache_shape(full_w.config));
    const std::span<const std::int32_t> p(prompt);
    auto t0 = Clock::now();
    Tensor<float> logits;
    if (mode == GenMode::overfill) {
      forward_prefill(full_w, p.first(p.size() - 1), cache);
      logits = decode_step(pruned_w, p.back(), cache, p.size() - 1);
    } else {
      logits = forward_prefill(mode == GenMode::full ? full_w : pruned_w, p, cache).logits_last;
    }
    t.prefill += seconds_since(t0);

    t0 = Clock::now();
    for (std::size_t n = 0; n < new_tokens; ++n) {
      logits = decode_step(dec_w, argmax(logits), cache, cache.filled_len());
    }
    t.decode += seconds_since(t0);
  }
  return t;
}

std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0};
}

}  // namespace

std::vector<CostReport> bench_wallclock(const Weights<float>& full_w, const Weights<float>& pruned_w,
                                        std::size_t prompt_len, std::size_t new_tokens, std::size_t batch,
                                        std::span<const GenMode> modes, const BenchOptions& options) {
  if (prompt_len < 2 || batch == 0 || options.repeats == 0) {
    throw std::invalid_argument("bench needs M >= 2, a positive batch and at least one repeat");
  }
  if (cache_shape(full_w.config) != cache_shape(pruned_w.config)) {
    throw DimensionError("full and pruned models disagree on cache geometry");
  }
  CounterRng rng(options.seed, 0);
  std::vector<std::vector<std::int32_t>> prompts(batch);
  for (auto& p : prompts) {
    for (std::size_t i = 0; i < prompt_len; ++i) p.push_back(static_cast<std::int32_t>(rng.below(256)));
  }

  std::vector<std::vector<double>> pre(modes.size()), dec(modes.size());
  for (std::size_t rep = 0; rep < options.warmups + options.repeats; ++rep) {
    for (std::size_t i = 0; i < modes.size(); ++i) {
      const PhaseTimes t = run_once(full_w, pruned_w, prompts, new_tokens, modes[i]);
      if (rep < options.warmups) continue;
      pre[i].push_back(t.prefill);
      dec[i].push_back(t.decode);
    }
  }

  std::vector<CostReport> out;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    CostReport r;
    r.mode = modes[i];
    r.prompt_len = prompt_len;
    r.new_tokens = new_tokens;
    r.batch = batch;
    r.params = param_count(modes[i] == GenMode::full ? full_w.config : pruned_w.config);
    std::tie(r.prefill_s, r.prefill_sd) = mean_sd(pre[i]);
    std::tie(r.decode_s, r.decode_sd) = mean_sd(dec[i]);
    r.total_s = r.prefill_s + r.decode_s;
    out.push_back(r);
  }
  return out;
}

void write_cost_csv_header(std::ostream& os) {
  os << "mode,M,N,batch,prefill_s,decode_s,total_s,params,prefill_sd,decode_sd\n";
}

void write_cost_csv_row(std::ostream& os, const CostReport& r) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << mode_name(r.mode) << ',' << r.prompt_len << ',' << r.new_tokens << ',' << r.batch << ','
     << std::setprecision(9) << r.prefill_s << ',' << r.decode_s << ',' << r.total_s << ',' << r.params << ','
     << r.prefill_sd << ',' << r.decode_sd << '\n';
  os.flags(flags);
  os.precision(prec);
}

}  // namespace overfill
