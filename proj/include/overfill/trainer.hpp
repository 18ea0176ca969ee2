#pragma once

// Teacher-forced training. Two regimes share one code path:
//   standalone - one model reads the whole formatted example;
//   overfill   - a frozen full model prefills x_1..x_{M-1} into a cache that
//                the trainable pruned model continues from x_M onward.
// In both, only positions whose target is an assistant token contribute to
// the loss.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "overfill/corpus.hpp"
#include "overfill/model.hpp"

namespace overfill {

struct TrainBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> token_ids;    // [rows x cols], PAD beyond each row's length
  std::vector<std::int32_t> targets;      // [rows x cols], token_ids shifted left by one
  std::vector<std::uint8_t> loss_mask;    // [rows x cols], set where targets holds an assistant token
  std::vector<std::size_t> prefill_len;   // M per row
  std::vector<std::size_t> lengths;       // real tokens per row

  std::span<const std::int32_t> row_ids(std::size_t r) const { return {token_ids.data() + r * cols, lengths[r]}; }
  std::size_t masked_count() const;
};

/// Formats, truncates to max_seq_len, and right-pads. Rows left without any
/// assistant target after truncation are dropped; an empty assistant text is
/// an error.
TrainBatch build_batch(std::span<const ChatExample> examples, const Tokenizer& tok, std::size_t max_seq_len);

enum class TrainMode { standalone, overfill };

struct AdamConfig {
  double base_lr = 1e-3;
  double warmup_ratio = 0.01;
  std::size_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct OptState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
};

template <typename T>
OptState<T> make_opt_state(const Weights<T>& w, const AdamConfig& config);

/// Linear warmup over ceil(warmup_ratio * total_steps) steps (at least one),
/// then cosine decay reaching 0 at total_steps.
double lr_schedule(std::size_t step, const AdamConfig& config);

/// One decoupled-weight-decay Adam update; increments opt.step and uses
/// lr_schedule(opt.step). grads follow for_each_param order.
template <typename T>
void adamw_update(Weights<T>& w, std::span<const Tensor<T>> grads, OptState<T>& opt);

template <typename T>
struct LossAndGrads {
  T loss{};
  std::vector<Tensor<T>> grads;  // for_each_param order of the trained model
};

/// Masked loss of `model`. In overfill mode `prefill` supplies the frozen
/// cache for x_1..x_{M-1}; in standalone mode it is ignored.
template <typename T>
T batch_loss(TrainMode mode, const Weights<T>* prefill, const Weights<T>& model, const TrainBatch& batch);

template <typename T>
LossAndGrads<T> loss_and_grads(TrainMode mode, const Weights<T>* prefill, const Weights<T>& model,
                               const TrainBatch& batch);

/// One OverFill update of pruned_w against the frozen full_w. Returns the
/// pre-update loss. Throws if full_w is not frozen or the cache geometries
/// differ.
template <typename T>
T train_step(const Weights<T>& full_w, Weights<T>& pruned_w, const TrainBatch& batch, OptState<T>& opt);

/// One update of a model that prefills and decodes by itself.
template <typename T>
T train_step_standalone(Weights<T>& w, const TrainBatch& batch, OptState<T>& opt);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  std::size_t max_seq_len = 256;
  double lr = 1e-3;
  double warmup_ratio = 0.01;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;

  bool operator==(const TrainConfig&) const = default;
};

struct LogRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::size_t tokens_seen = 0;
};

struct TrainCallbacks {
  std::function<void(const LogRow&)> on_step;
  /// Fired every checkpoint_every steps with the step number.
  std::function<void(std::size_t)> on_checkpoint;
};

/// Runs config.steps updates over `data` in a seeded, epoch-wise shuffled
/// order. `prefill` must be non-null (and frozen) in overfill mode.
template <typename T>
std::vector<LogRow> train(TrainMode mode, const Weights<T>* prefill, Weights<T>& model,
                          std::span<const ChatExample> data, const Tokenizer& tok, const TrainConfig& config,
                          const TrainCallbacks& callbacks = {});

/// Example order used by train(): example indices for step `step`.
std::vector<std::size_t> batch_indices(std::size_t n_examples, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t step);

struct PositionProfile {
  std::vector<double> mean_prob;  // index p-1 holds output position p
  std::vector<std::size_t> count;
};

/// Teacher-forced probability of each reference assistant token, bucketed by
/// output position 1..max_pos. `full_w` prefills x_1..x_{M-1}; `pruned_w`
/// scores from x_M on. Pass the same model twice for a single-model profile.
template <typename T>
PositionProfile position_prob_profile(const Weights<T>& full_w, const Weights<T>& pruned_w,
                                      std::span<const ChatExample> eval_set, const Tokenizer& tok,
                                      std::size_t max_pos);

/// Per-example version of the above: probabilities of y_1..y_N.
template <typename T>
std::vector<double> reference_token_probs(const Weights<T>& full_w, const Weights<T>& pruned_w,
                                          const FormattedChat& chat);

}  // namespace overfill
