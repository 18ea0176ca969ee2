#pragma once

// Parameter counting, an analytic roofline latency model, and wall-clock
// timing of this implementation's prefill and decode phases.

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "overfill/engine.hpp"
#include "overfill/model.hpp"

namespace overfill {

/// Embeddings (once if tied) + per-layer attention, gated FFN and norms +
/// final norm + untied head.
std::size_t param_count(const ModelConfig& config);

struct HardwareSpec {
  double peak_flops = 312e12;      // dense bf16, A100-class
  double mem_bandwidth = 2.039e12;  // bytes/s
  double bytes_per_param = 2;

  void validate() const;
};

struct RooflineOptions {
  /// Adds attention-score FLOPs and KV-cache read bytes on top of the
  /// 2 * params per token estimate.
  bool attention_terms = true;
};

struct CostReport {
  GenMode mode = GenMode::full;
  std::size_t prompt_len = 0;  // M
  std::size_t new_tokens = 0;  // N
  std::size_t batch = 1;
  double prefill_s = 0;
  double decode_s = 0;
  double total_s = 0;
  std::size_t params = 0;  // the model that runs the decode phase
  double prefill_sd = 0;   // wall-clock only
  double decode_sd = 0;
};

/// prefill: 2 * P_prefill * M * batch / peak (plus attention FLOPs).
/// decode: sum over steps of max(bytes / bandwidth, flops / peak), where the
/// bytes are the decode model's weights (plus cache reads) and the flops are
/// 2 * P_decode * batch (plus attention FLOPs). Overfill prefills with the
/// full config and decodes with the pruned one.
CostReport roofline_estimate(const HardwareSpec& hw, const ModelConfig& full, const ModelConfig& pruned,
                             std::size_t prompt_len, std::size_t new_tokens, std::size_t batch, GenMode mode,
                             const RooflineOptions& options = {});

struct BenchOptions {
  std::size_t repeats = 10;
  std::size_t warmups = 2;
  std::uint64_t seed = 0;
};

/// Times each mode on random prompts of length M. The prefill phase runs
/// until the logits for y_1 exist; the decode phase is N greedy decode steps
/// feeding y_1..y_N, without early stopping. The batch runs sequentially.
/// Modes are interleaved within every repeat. Returns one report per mode,
/// in the order given.
std::vector<CostReport> bench_wallclock(const Weights<float>& full_w, const Weights<float>& pruned_w,
                                        std::size_t prompt_len, std::size_t new_tokens, std::size_t batch,
                                        std::span<const GenMode> modes, const BenchOptions& options = {});

void write_cost_csv_header(std::ostream& os);
void write_cost_csv_row(std::ostream& os, const CostReport& r);

}  // namespace overfill
