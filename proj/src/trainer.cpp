#include "overfill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "overfill/kernels.hpp"
#include "overfill/rng.hpp"

namespace overfill {

std::size_t TrainBatch::masked_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

TrainBatch build_batch(std::span<const ChatExample> examples, const Tokenizer& tok, std::size_t max_seq_len) {
  if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be at least 2");
  std::vector<FormattedChat> kept;
  for (const auto& ex : examples) {
    if (ex.assistant.empty()) throw std::invalid_argument("example has empty assistant text");
    FormattedChat fc = format_chat(ex, tok);
    if (fc.ids.size() > max_seq_len) fc.ids.resize(max_seq_len);
    if (fc.ids.size() <= fc.prefill_len) continue;
    kept.push_back(std::move(fc));
  }
  if (kept.empty()) throw std::invalid_argument("no example keeps an assistant token within max_seq_len");

  TrainBatch b;
  b.rows = kept.size();
  for (const auto& fc : kept) b.cols = std::max(b.cols, fc.ids.size());
  b.token_ids.assign(b.rows * b.cols, Tokenizer::kPad);
  b.targets.assign(b.rows * b.cols, Tokenizer::kPad);
  b.loss_mask.assign(b.rows * b.cols, 0);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& fc = kept[r];
    const std::size_t len = fc.ids.size();
    b.prefill_len.push_back(fc.prefill_len);
    b.lengths.push_back(len);
    std::copy(fc.ids.begin(), fc.ids.end(), b.token_ids.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
    for (std::size_t t = 0; t + 1 < len; ++t) {
      b.targets[r * b.cols + t] = fc.ids[t + 1];
      b.loss_mask[r * b.cols + t] = (t + 1 >= fc.prefill_len) ? 1 : 0;
    }
  }
  return b;
}

// ---- optimizer ---------------------------------------------------------------

template <typename T>
OptState<T> make_opt_state(const Weights<T>& w, const AdamConfig& config) {
  OptState<T> opt;
  opt.config = config;
  w.for_each_param([&](const std::string&, const Tensor<T>& t) {
    opt.first_moment.emplace_back(t.shape());
    opt.second_moment.emplace_back(t.shape());
  });
  return opt;
}

double lr_schedule(std::size_t step, const AdamConfig& config) {
  const std::size_t total = std::max<std::size_t>(config.total_steps, 1);
  const auto warm = std::min(
      total, std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(total)))));
  if (step >= total && total > warm) return 0.0;
  if (step <= warm) return config.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_update(Weights<T>& w, std::span<const Tensor<T>> grads, OptState<T>& opt) {
  if (w.frozen) throw std::logic_error("refusing to update a frozen model");
  if (grads.size() != opt.first_moment.size()) {
    throw DimensionError("optimizer holds " + std::to_string(opt.first_moment.size()) + " moments but got " +
                         std::to_string(grads.size()) + " gradients");
  }
  ++opt.step;
  const AdamConfig& c = opt.config;
  const T lr = static_cast<T>(lr_schedule(opt.step, c));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(opt.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(opt.step)));
  const T eps = static_cast<T>(c.eps), wd = static_cast<T>(c.weight_decay);
  std::size_t i = 0;
  w.for_each_param([&](const std::string& name, Tensor<T>& p) {
    const Tensor<T>& g = grads[i];
    Tensor<T>& m = opt.first_moment[i];
    Tensor<T>& v = opt.second_moment[i];
    ++i;
    if (g.shape() != p.shape()) {
      throw DimensionError("gradient for " + name + " has shape " + to_string(g.shape()) + ", parameter " +
                           to_string(p.shape()));
    }
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = b1 * m[e] + (T{1} - b1) * g[e];
      v[e] = b2 * v[e] + (T{1} - b2) * g[e] * g[e];
      const T mhat = m[e] / bc1;
      const T vhat = v[e] / bc2;
      p[e] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[e]);
    }
  });
}

// ---- loss ---------------------------------------------------------------------

namespace {

template <typename T>
struct PreparedBatch {
  std::vector<KVCache<T>> caches;  // reserved up front; segments point into it
  PackedTokens<T> packed;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};

template <typename T>
void check_pair(const Weights<T>& full_w, const Weights<T>& pruned_w) {
  if (cache_shape(full_w.config) != cache_shape(pruned_w.config)) {
    throw DimensionError("prefill and decode models disagree on cache geometry");
  }
  if (full_w.config.vocab_size != pruned_w.config.vocab_size) {
    throw DimensionError("prefill and decode models disagree on vocabulary size");
  }
}

template <typename T>
void prepare(TrainMode mode, const Weights<T>* prefill, const Weights<T>& model, const TrainBatch& batch,
             PreparedBatch<T>& out) {
  if (mode == TrainMode::overfill) {
    if (!prefill) throw std::invalid_argument("overfill training needs a prefill model");
    check_pair(*prefill, model);
  }
  out.caches.reserve(batch.rows);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto ids = batch.row_ids(r);
    const std::size_t len = batch.lengths[r];
    std::size_t start = 0;
    const KVCache<T>* prefix = nullptr;
    if (mode == TrainMode::overfill) {
      start = batch.prefill_len[r] - 1;
      out.caches.emplace_back(cache_shape(prefill->config));
      if (start > 0) forward_tokens(*prefill, ids.subspan(0, start), out.caches.back());
      prefix = &out.caches.back();
    }
    out.packed.add_segment(ids.subspan(start, len - 1 - start), prefix);
    for (std::size_t t = start; t + 1 < len; ++t) {
      out.targets.push_back(batch.targets[r * batch.cols + t]);
      out.mask.push_back(batch.loss_mask[r * batch.cols + t]);
    }
  }
}

}  // namespace

template <typename T>
LossAndGrads<T> loss_and_grads(TrainMode mode, const Weights<T>* prefill, const Weights<T>& model,
                               const TrainBatch& batch) {
  PreparedBatch<T> prep;
  prepare(mode, prefill, model, batch, prep);
  Tape<T> tape;
  const ParamVars vars = bind_weights(tape, model, true);
  const Var logits = forward_train(tape, model, vars, prep.packed);
  const Var loss = ad::masked_cross_entropy(tape, logits, std::span<const std::int32_t>(prep.targets),
                                            std::span<const std::uint8_t>(prep.mask));
  LossAndGrads<T> out;
  out.loss = tape.value(loss)[0];
  out.grads = tape.gradients(loss, vars.all);
  return out;
}

template <typename T>
T batch_loss(TrainMode mode, const Weights<T>* prefill, const Weights<T>& model, const TrainBatch& batch) {
  PreparedBatch<T> prep;
  prepare(mode, prefill, model, batch, prep);
  Tape<T> tape;
  const ParamVars vars = bind_weights(tape, model, false);
  const Var logits = forward_train(tape, model, vars, prep.packed);
  return masked_cross_entropy(tape.value(logits), std::span<const std::int32_t>(prep.targets),
                              std::span<const std::uint8_t>(prep.mask));
}

template <typename T>
T train_step(const Weights<T>& full_w, Weights<T>& pruned_w, const TrainBatch& batch, OptState<T>& opt) {
  if (!full_w.frozen) throw std::logic_error("overfill training requires a frozen full model");
  auto lg = loss_and_grads(TrainMode::overfill, &full_w, pruned_w, batch);
  adamw_update(pruned_w, std::span<const Tensor<T>>(lg.grads), opt);
  return lg.loss;
}

template <typename T>
T train_step_standalone(Weights<T>& w, const TrainBatch& batch, OptState<T>& opt) {
  auto lg = loss_and_grads(TrainMode::standalone, static_cast<const Weights<T>*>(nullptr), w, batch);
  adamw_update(w, std::span<const Tensor<T>>(lg.grads), opt);
  return lg.loss;
}

// ---- training loop --------------------------------------------------------------

namespace {

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  CounterRng rng(seed, 0x5eed0000ULL + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw std::invalid_argument("training data is empty");
  }
  std::vector<std::size_t> batch(std::size_t batch_size, std::size_t step) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < batch_size; ++j) {
      const std::size_t k = step * batch_size + j;
      const std::size_t epoch = k / n_;
      if (epoch != epoch_) {
        perm_ = epoch_permutation(n_, seed_, epoch);
        epoch_ = epoch;
      }
      out.push_back(perm_[k % n_]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm_;
};

}  // namespace

std::vector<std::size_t> batch_indices(std::size_t n_examples, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t step) {
  EpochSampler sampler(n_examples, seed);
  return sampler.batch(batch_size, step);
}

template <typename T>
std::vector<LogRow> train(TrainMode mode, const Weights<T>* prefill, Weights<T>& model,
                          std::span<const ChatExample> data, const Tokenizer& tok, const TrainConfig& config,
                          const TrainCallbacks& callbacks) {
  if (config.steps == 0 || config.batch_size == 0) throw std::invalid_argument("training needs steps and batch size");
  if (mode == TrainMode::overfill && (!prefill || !prefill->frozen)) {
    throw std::logic_error("overfill training requires a frozen full model");
  }
  AdamConfig ac;
  ac.base_lr = config.lr;
  ac.warmup_ratio = config.warmup_ratio;
  ac.total_steps = config.steps;
  OptState<T> opt = make_opt_state(model, ac);
  EpochSampler sampler(data.size(), config.seed);
  std::vector<LogRow> log;
  std::size_t tokens_seen = 0;
  std::vector<ChatExample> chosen;
  for (std::size_t step = 0; step < config.steps; ++step) {
    chosen.clear();
    for (std::size_t idx : sampler.batch(config.batch_size, step)) chosen.push_back(data[idx]);
    const TrainBatch batch = build_batch(chosen, tok, config.max_seq_len);
    const T loss = mode == TrainMode::overfill ? train_step(*prefill, model, batch, opt)
                                               : train_step_standalone(model, batch, opt);
    for (auto len : batch.lengths) tokens_seen += len;
    LogRow row{opt.step, lr_schedule(opt.step, ac), static_cast<double>(loss), tokens_seen};
    log.push_back(row);
    if (callbacks.on_step) callbacks.on_step(row);
    if (config.checkpoint_every && opt.step % config.checkpoint_every == 0 && callbacks.on_checkpoint) {
      callbacks.on_checkpoint(opt.step);
    }
  }
  return log;
}

// ---- per-position profile --------------------------------------------------------

template <typename T>
std::vector<double> reference_token_probs(const Weights<T>& full_w, const Weights<T>& pruned_w,
                                          const FormattedChat& chat) {
  check_pair(full_w, pruned_w);
  const std::size_t m = chat.prefill_len, len = chat.ids.size();
  if (m == 0 || len <= m) throw std::invalid_argument("example needs a prompt and at least one reference token");
  const std::span<const std::int32_t> ids(chat.ids);
  KVCache<T> cache(cache_shape(full_w.config));
  if (m > 1) forward_tokens(full_w, ids.subspan(0, m - 1), cache);
  const Tensor<T> hidden = forward_tokens(pruned_w, ids.subspan(m - 1, len - m), cache);
  const Tensor<T> probs = kernels::softmax_rows(lm_logits(pruned_w, hidden));
  std::vector<double> out(len - m);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<double>(probs.at(j, static_cast<std::size_t>(ids[m + j])));
  return out;
}

template <typename T>
PositionProfile position_prob_profile(const Weights<T>& full_w, const Weights<T>& pruned_w,
                                      std::span<const ChatExample> eval_set, const Tokenizer& tok,
                                      std::size_t max_pos) {
  if (eval_set.empty()) throw std::invalid_argument("position profile needs a non-empty eval set");
  PositionProfile prof;
  prof.mean_prob.assign(max_pos, 0.0);
  prof.count.assign(max_pos, 0);
  for (const auto& ex : eval_set) {
    const auto probs = reference_token_probs(full_w, pruned_w, format_chat(ex, tok));
    for (std::size_t j = 0; j < probs.size() && j < max_pos; ++j) {
      prof.mean_prob[j] += probs[j];
      ++prof.count[j];
    }
  }
  for (std::size_t p = 0; p < max_pos; ++p) {
    if (prof.count[p]) prof.mean_prob[p] /= static_cast<double>(prof.count[p]);
  }
  return prof;
}

#define OVERFILL_INSTANTIATE(T)                                                                                    \
  template OptState<T> make_opt_state<T>(const Weights<T>&, const AdamConfig&);                                  \
  template void adamw_update<T>(Weights<T>&, std::span<const Tensor<T>>, OptState<T>&);                           \
  template LossAndGrads<T> loss_and_grads<T>(TrainMode, const Weights<T>*, const Weights<T>&, const TrainBatch&);  \
  template T batch_loss<T>(TrainMode, const Weights<T>*, const Weights<T>&, const TrainBatch&);                   \
  template T train_step<T>(const Weights<T>&, Weights<T>&, const TrainBatch&, OptState<T>&);                      \
  template T train_step_standalone<T>(Weights<T>&, const TrainBatch&, OptState<T>&);                              \
  template std::vector<LogRow> train<T>(TrainMode, const Weights<T>*, Weights<T>&, std::span<const ChatExample>,  \
                                        const Tokenizer&, const TrainConfig&, const TrainCallbacks&);             \
  template std::vector<double> reference_token_probs<T>(const Weights<T>&, const Weights<T>&,                     \
                                                        const FormattedChat&);                                     \
  template PositionProfile position_prob_profile<T>(const Weights<T>&, const Weights<T>&,                          \
                                                    std::span<const ChatExample>, const Tokenizer&, std::size_t);

OVERFILL_INSTANTIATE(float)
OVERFILL_INSTANTIATE(double)
#undef OVERFILL_INSTANTIATE

}  // namespace overfill
