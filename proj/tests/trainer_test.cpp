#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "overfill/checkpoint.hpp"
#include "overfill/pruner.hpp"
#include "overfill/rng.hpp"
#include "overfill/trainer.hpp"
#include "reference.hpp"

using namespace overfill;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.head_dim = 4;
  c.intermediate_dim = 12;
  return c;
}

template <typename T>
Weights<T> scaled_model(const ModelConfig& c, std::uint64_t seed, double scale) {
  auto w = init_model<T>(c, seed);
  w.for_each_param([&](const std::string& name, Tensor<T>& t) {
    if (name.ends_with("norm")) return;
    for (T& v : t.values()) v = static_cast<T>(v * scale);
  });
  return w;
}

Weights<double> half_slice(const Weights<double>& w) {
  const auto& c = w.config;
  ChannelSelection sel;
  for (std::size_t i = 1; i < c.hidden_dim; i += 2) sel.hidden_idx.push_back(i);
  sel.inter_idx.assign(c.n_layers, {});
  for (auto& v : sel.inter_idx) {
    for (std::size_t i = 0; i < c.intermediate_dim; i += 2) v.push_back(i);
  }
  return slice_model(w, sel);
}

std::vector<ChatExample> examples(std::size_t n, std::uint64_t seed) {
  const std::vector<TaskKind> kinds{TaskKind::copy, TaskKind::modadd, TaskKind::kvlookup, TaskKind::reverse};
  TaskOptions opt;
  opt.kv_pairs = 3;
  opt.kv_value_len = 2;
  return gen_mixture(kinds, seed, n, opt);
}

std::size_t checksum(const Weights<float>& w) { return std::hash<std::string>{}(checkpoint_bytes(w)); }

}  // namespace

TEST(ScheduleTest, WarmupThenCosine) {
  AdamConfig a;
  a.base_lr = 1e-3;
  a.warmup_ratio = 0.01;
  a.total_steps = 1000;
  EXPECT_EQ(lr_schedule(0, a), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5, a), 5e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(10, a), 1e-3);
  EXPECT_NEAR(lr_schedule(505, a), 5e-4, 1e-12);
  EXPECT_EQ(lr_schedule(1000, a), 0.0);
  for (std::size_t s = 11; s <= 1000; ++s) EXPECT_LE(lr_schedule(s, a), lr_schedule(s - 1, a));
}

TEST(BatchTest, MaskCoversAssistantAndEos) {
  Tokenizer tok;
  const auto ex = examples(40, 1);
  const auto b = build_batch(ex, tok, 256);
  ASSERT_EQ(b.rows, ex.size());
  std::size_t total = 0;
  for (std::size_t r = 0; r < b.rows; ++r) {
    std::vector<std::int32_t> picked;
    for (std::size_t t = 0; t < b.cols; ++t) {
      if (b.loss_mask[r * b.cols + t]) picked.push_back(b.targets[r * b.cols + t]);
    }
    ASSERT_FALSE(picked.empty());
    EXPECT_EQ(picked.back(), Tokenizer::kEos);
    picked.pop_back();
    EXPECT_EQ(tok.decode(picked), ex[r].assistant);
    total += ex[r].assistant.size() + 1;
    // The first masked target is the one predicted from x_M.
    EXPECT_EQ(b.loss_mask[r * b.cols + b.prefill_len[r] - 1], 1);
    EXPECT_EQ(b.loss_mask[r * b.cols + b.prefill_len[r] - 2], 0);
  }
  EXPECT_EQ(b.masked_count(), total);
}

TEST(BatchTest, PaddingIsMasked) {
  Tokenizer tok;
  const std::vector<ChatExample> ex{{"copy", "abcdefgh", "abcdefgh", TaskKind::copy}, {"copy", "ab", "ab", TaskKind::copy}};
  const auto b = build_batch(ex, tok, 256);
  EXPECT_EQ(b.cols, b.lengths[0]);
  for (std::size_t t = b.lengths[1]; t < b.cols; ++t) {
    EXPECT_EQ(b.token_ids[b.cols + t], Tokenizer::kPad);
    EXPECT_EQ(b.loss_mask[b.cols + t], 0);
  }
  EXPECT_EQ(b.lengths[1], format_chat(ex[1], tok).ids.size());
}

TEST(BatchTest, TruncationAndErrors) {
  Tokenizer tok;
  const std::vector<ChatExample> ex{{"copy", "abcdefgh", "abcdefgh", TaskKind::copy}};
  const std::size_t m = format_chat(ex[0], tok).prefill_len;
  const auto b = build_batch(ex, tok, m + 2);
  EXPECT_EQ(b.cols, m + 2);
  EXPECT_EQ(b.masked_count(), 2u);
  EXPECT_THROW(build_batch(ex, tok, m), std::invalid_argument);
  const std::vector<ChatExample> empty_answer{{"copy", "a", "", TaskKind::copy}};
  EXPECT_THROW(build_batch(empty_answer, tok, 64), std::invalid_argument);
}

TEST(LossTest, GradientsMatchFiniteDifferencesThroughFrozenCache) {
  const auto c = tiny_config();
  auto full = scaled_model<double>(c, 1, 10.0);
  full.frozen = true;
  auto pruned = half_slice(scaled_model<double>(c, 2, 10.0));
  const auto batch = build_batch(examples(3, 3), Tokenizer{}, 64);

  for (TrainMode mode : {TrainMode::overfill, TrainMode::standalone}) {
    const auto lg = loss_and_grads(mode, &full, pruned, batch);
    EXPECT_EQ(lg.loss, batch_loss(mode, &full, pruned, batch));
    std::size_t idx = 0;
    CounterRng pick(4);
    pruned.for_each_param([&](const std::string& name, Tensor<double>& t) {
      const auto& g = lg.grads[idx++];
      ASSERT_EQ(g.shape(), t.shape()) << name;
      double diff = 0, na = 0, nn = 0;
      for (int s = 0; s < 12; ++s) {
        std::size_t e = pick.below(t.size());
        if (name == "token_embedding") e = static_cast<std::size_t>(batch.token_ids[pick.below(batch.lengths[0])]) * t.cols() + pick.below(t.cols());
        const double keep = t[e], h = 1e-5;
        t[e] = keep + h;
        const double up = batch_loss(mode, &full, pruned, batch);
        t[e] = keep - h;
        const double down = batch_loss(mode, &full, pruned, batch);
        t[e] = keep;
        const double num = (up - down) / (2 * h);
        diff += (num - g[e]) * (num - g[e]);
        na += g[e] * g[e];
        nn += num * num;
      }
      const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
      EXPECT_LT(rel, 1e-3) << name;
    });
  }
}

TEST(LossTest, FullModelAffectsOverfillLossOnlyThroughCache) {
  const auto c = tiny_config();
  auto full = scaled_model<double>(c, 5, 10.0);
  full.frozen = true;
  const auto pruned = half_slice(scaled_model<double>(c, 6, 10.0));
  const auto batch = build_batch(examples(2, 7), Tokenizer{}, 64);
  const double base = batch_loss(TrainMode::overfill, &full, pruned, batch);
  auto other = full;
  other.layers[0].wk[3] += 1.0;
  EXPECT_NE(batch_loss(TrainMode::overfill, &other, pruned, batch), base);
  // The head and final norm of the full model never run in overfill mode.
  other = full;
  other.lm_head[0] += 1.0;
  other.final_norm[0] += 1.0;
  EXPECT_EQ(batch_loss(TrainMode::overfill, &other, pruned, batch), base);
  // Standalone mode never touches the prefill model.
  EXPECT_EQ(batch_loss(TrainMode::standalone, &full, pruned, batch),
            batch_loss(TrainMode::standalone, &other, pruned, batch));
}

TEST(LossTest, MatchesReferenceForward) {
  const auto c = tiny_config();
  const auto full = scaled_model<double>(c, 8, 10.0);
  const auto pruned = half_slice(scaled_model<double>(c, 9, 10.0));
  const auto ex = examples(2, 10);
  const auto batch = build_batch(ex, Tokenizer{}, 64);
  double total = 0;
  std::size_t count = 0;
  for (const auto& e : ex) {
    const auto f = format_chat(e, Tokenizer{});
    const auto logits = ref::forward(full, pruned, f.ids, f.prefill_len - 1);
    for (std::size_t t = f.prefill_len - 1; t + 1 < f.ids.size(); ++t) {
      double top = -1e300, z = 0;
      for (double v : logits[t]) top = std::max(top, v);
      for (double v : logits[t]) z += std::exp(v - top);
      total += -(logits[t][f.ids[t + 1]] - top - std::log(z));
      ++count;
    }
  }
  EXPECT_NEAR(batch_loss(TrainMode::overfill, &full, pruned, batch), total / count, 1e-10);
}

TEST(LossTest, PromptTargetsDoNotMatter) {
  const ModelConfig c;
  auto full = init_model<float>(c, 11);
  full.frozen = true;
  PruneConfig p;
  const auto dims = compute_pruned_dims(c.hidden_dim, c.intermediate_dim, p);
  ChannelSelection sel;
  for (std::size_t i = 0; i < dims.hidden; ++i) sel.hidden_idx.push_back(i);
  sel.inter_idx.assign(c.n_layers, {});
  for (auto& v : sel.inter_idx) {
    for (std::size_t i = 0; i < dims.intermediate; ++i) v.push_back(i);
  }
  const auto pruned = slice_model(full, sel);
  const auto batch = build_batch(examples(8, 12), Tokenizer{}, 256);
  auto changed = batch;
  CounterRng rng(13);
  for (std::size_t i = 0; i < changed.targets.size(); ++i) {
    if (!changed.loss_mask[i]) changed.targets[i] = static_cast<std::int32_t>(rng.below(260));
  }
  for (TrainMode mode : {TrainMode::overfill, TrainMode::standalone}) {
    const auto a = loss_and_grads(mode, &full, pruned, batch);
    const auto b = loss_and_grads(mode, &full, pruned, changed);
    EXPECT_EQ(a.loss, b.loss);
    for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE(a.grads[i] == b.grads[i]);
  }
}

TEST(StepTest, LossDecreasesOnFixedBatch) {
  const ModelConfig c;
  auto full = init_model<float>(c, 14);
  full.frozen = true;
  auto pruned = slice_model(full, select_channels({std::vector<double>(64, 1.0),
                                                   std::vector<std::vector<double>>(4, std::vector<double>(256, 1.0))},
                                                  32, 128));
  auto solo = init_model<float>(c, 15);
  const auto batch = build_batch(examples(8, 16), Tokenizer{}, 256);
  AdamConfig a;
  a.base_lr = 1e-3;
  a.total_steps = 1000;
  auto opt = make_opt_state(pruned, a);
  auto opt_solo = make_opt_state(solo, a);
  float prev = std::numeric_limits<float>::infinity(), prev_solo = prev;
  for (int s = 0; s < 20; ++s) {
    const float loss = train_step(full, pruned, batch, opt);
    const float loss_solo = train_step_standalone(solo, batch, opt_solo);
    EXPECT_LT(loss, prev) << s;
    EXPECT_LT(loss_solo, prev_solo) << s;
    prev = loss;
    prev_solo = loss_solo;
  }
  EXPECT_EQ(opt.step, 20u);
}

TEST(StepTest, FrozenModelUntouched) {
  const ModelConfig c;
  auto full = init_model<float>(c, 17);
  full.frozen = true;
  const std::size_t before = checksum(full);
  const auto copy = full;
  auto pruned = slice_model(full, select_channels({std::vector<double>(64, 1.0),
                                                   std::vector<std::vector<double>>(4, std::vector<double>(256, 1.0))},
                                                  32, 128));
  TrainConfig tc;
  tc.steps = 100;
  tc.batch_size = 4;
  tc.seed = 18;
  const auto data = examples(64, 19);
  const auto log = train(TrainMode::overfill, &full, pruned, std::span<const ChatExample>(data), Tokenizer{}, tc);
  EXPECT_EQ(log.size(), 100u);
  EXPECT_EQ(checksum(full), before);
  EXPECT_TRUE(full == copy);
}

TEST(StepTest, Preconditions) {
  const ModelConfig c;
  auto full = init_model<float>(c, 20);
  auto pruned = full;
  const auto batch = build_batch(examples(2, 21), Tokenizer{}, 256);
  auto opt = make_opt_state(pruned, AdamConfig{});
  EXPECT_THROW(train_step(full, pruned, batch, opt), std::logic_error);
  full.frozen = true;
  EXPECT_THROW(train_step_standalone(full, batch, opt), std::logic_error);
  auto other = c;
  other.n_kv_heads = 4;
  auto foreign = init_model<float>(other, 22);
  auto opt2 = make_opt_state(foreign, AdamConfig{});
  EXPECT_THROW(train_step(full, foreign, batch, opt2), DimensionError);
  TrainConfig tc;
  tc.steps = 1;
  const auto data = examples(2, 23);
  EXPECT_THROW(train(TrainMode::overfill, static_cast<const Weights<float>*>(nullptr), pruned,
                     std::span<const ChatExample>(data), Tokenizer{}, tc),
               std::exception);
}

TEST(TrainTest, DeterministicWithCheckpoints) {
  const ModelConfig c;
  TrainConfig tc;
  tc.steps = 6;
  tc.batch_size = 3;
  tc.seed = 24;
  tc.checkpoint_every = 2;
  const auto data = examples(10, 25);
  auto run = [&] {
    auto w = init_model<float>(c, 26);
    std::vector<std::size_t> ckpts;
    TrainCallbacks cb;
    cb.on_checkpoint = [&](std::size_t s) { ckpts.push_back(s); };
    const auto log = train(TrainMode::standalone, static_cast<const Weights<float>*>(nullptr), w,
                           std::span<const ChatExample>(data), Tokenizer{}, tc, cb);
    EXPECT_EQ(ckpts, (std::vector<std::size_t>{2, 4, 6}));
    return std::make_pair(checksum(w), log.back().loss);
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainTest, EpochOrderCoversEveryExample) {
  std::vector<int> seen(10, 0);
  for (std::size_t step = 0; step < 5; ++step) {
    for (std::size_t i : batch_indices(10, 2, 7, step)) ++seen[i];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(batch_indices(10, 2, 7, 3), batch_indices(10, 2, 7, 3));
}

TEST(ProfileTest, MatchesManualScoring) {
  const auto c = tiny_config();
  const auto full = scaled_model<double>(c, 27, 10.0);
  const auto pruned = half_slice(scaled_model<double>(c, 28, 10.0));
  const auto ex = examples(3, 29);
  std::vector<double> sum(4, 0.0);
  std::vector<std::size_t> cnt(4, 0);
  for (const auto& e : ex) {
    const auto f = format_chat(e, Tokenizer{});
    const std::size_t m = f.prefill_len;
    const auto logits = ref::forward(full, pruned, f.ids, m - 1);
    const auto probs = reference_token_probs(full, pruned, f);
    ASSERT_EQ(probs.size(), f.ids.size() - m);
    for (std::size_t p = 0; p < probs.size(); ++p) {
      const auto& row = logits[m - 1 + p];
      double top = -1e300, z = 0;
      for (double v : row) top = std::max(top, v);
      for (double v : row) z += std::exp(v - top);
      const double expect = std::exp(row[f.ids[m + p]] - top) / z;
      EXPECT_NEAR(probs[p], expect, 1e-10);
      EXPECT_GE(probs[p], 0.0);
      EXPECT_LE(probs[p], 1.0);
      if (p < 4) {
        sum[p] += expect;
        ++cnt[p];
      }
    }
  }
  const auto prof = position_prob_profile(full, pruned, std::span<const ChatExample>(ex), Tokenizer{}, 4);
  ASSERT_EQ(prof.mean_prob.size(), 4u);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_EQ(prof.count[p], cnt[p]);
    if (cnt[p]) {
      EXPECT_NEAR(prof.mean_prob[p], sum[p] / cnt[p], 1e-10);
    }
  }
}

TEST(ProfileTest, IdentitySliceEqualsFull) {
  const auto full = init_model<float>(ModelConfig{}, 30);
  const auto same = slice_model(full, identity_selection(full.config));
  const auto ex = examples(6, 31);
  const auto a = position_prob_profile(full, same, std::span<const ChatExample>(ex), Tokenizer{}, 5);
  const auto b = position_prob_profile(full, full, std::span<const ChatExample>(ex), Tokenizer{}, 5);
  EXPECT_EQ(a.mean_prob, b.mean_prob);
  EXPECT_EQ(a.count, b.count);
}
