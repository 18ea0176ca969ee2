#pragma once

// Calibration-driven width pruning that keeps the KV cache geometry intact.
//
// Activations are tapped at three points per layer: the attention input
// (after attn_norm), the FFN input (after ffn_norm), and the FFN inner
// activation (silu(gate) * up, before w_down). For each tap a channel's
// score is the mean over sequence positions of the L2 norm over the batch.
// Hidden channels are ranked globally (one index set for every layer, the
// embeddings, and the head) by summing the two hidden taps over layers;
// intermediate channels are ranked per layer. Attention heads, head_dim and
// depth are never pruned.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "overfill/corpus.hpp"
#include "overfill/model.hpp"

namespace overfill {

struct PruneConfig {
  double p_hidden = 0.5;
  double p_intermediate = 0.5;
  std::size_t calib_batches = 8;
  std::size_t calib_batch_size = 16;
  std::size_t calib_seq_len = 128;
  std::size_t hardware_round_to = 0;  // 0 disables rounding

  bool operator==(const PruneConfig&) const = default;
};

struct PrunedDims {
  std::size_t hidden = 0;
  std::size_t intermediate = 0;
  bool operator==(const PrunedDims&) const = default;
};

/// D' = floor((1 - P_hidden) D), I' = floor((1 - P_intermediate) I), each
/// optionally rounded down to a multiple of hardware_round_to.
PrunedDims compute_pruned_dims(std::size_t hidden_dim, std::size_t intermediate_dim, const PruneConfig& config);

/// The model config a selection of that size produces.
ModelConfig pruned_config(const ModelConfig& full, const PrunedDims& dims);

/// Raw activations at the three taps, [sequences x seq_len x width].
template <typename T>
struct ActivationStats {
  std::size_t sequences = 0;
  std::size_t seq_len = 0;
  struct Layer {
    Tensor<T> pre_attn;
    Tensor<T> pre_ffn;
    Tensor<T> ffn_inner;
  };
  std::vector<Layer> layers;
};

using TokenBatch = std::vector<std::vector<std::int32_t>>;

/// Packs formatted examples back to back into calib_batches batches of
/// calib_batch_size windows of calib_seq_len tokens, cycling through the
/// examples as needed.
std::vector<TokenBatch> make_calibration_batches(std::span<const ChatExample> examples, const Tokenizer& tok,
                                                 const PruneConfig& config);

/// All sequences must share one length. Batches are concatenated along the
/// sequence axis in order.
template <typename T>
ActivationStats<T> collect_activations(const Weights<T>& w, std::span<const TokenBatch> calib);

struct ImportanceScores {
  std::vector<double> hidden;              // [D]
  std::vector<std::vector<double>> inter;  // [L][I]
};

/// mean over positions of the L2 norm over sequences, per channel.
template <typename T>
std::vector<double> channel_scores(const Tensor<T>& activations);

template <typename T>
ImportanceScores score_channels(const ActivationStats<T>& stats);

struct ChannelSelection {
  std::vector<std::size_t> hidden_idx;
  std::vector<std::vector<std::size_t>> inter_idx;

  bool operator==(const ChannelSelection&) const = default;
};

/// The k highest scores, ties going to the lower index, returned ascending.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

ChannelSelection select_channels(const ImportanceScores& scores, std::size_t hidden_keep, std::size_t inter_keep);

ChannelSelection identity_selection(const ModelConfig& config);

/// Throws if indices are unsorted, duplicated, out of range, or sized
/// inconsistently with `full`.
void validate_selection(const ChannelSelection& sel, const ModelConfig& full);

/// Copies the retained rows and columns of every tensor. Output and KV
/// projection widths are untouched so the cache geometry is preserved.
template <typename T>
Weights<T> slice_model(const Weights<T>& w, const ChannelSelection& sel);

struct SelectionProvenance {
  std::uint64_t calib_seed = 0;
  double p_hidden = 0;
  double p_intermediate = 0;
};

nlohmann::ordered_json selection_to_json(const ChannelSelection& sel, const SelectionProvenance& prov);
ChannelSelection selection_from_json(const nlohmann::json& j);

nlohmann::ordered_json scores_to_json(const ImportanceScores& scores);
ImportanceScores scores_from_json(const nlohmann::json& j);

}  // namespace overfill
