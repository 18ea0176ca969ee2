#include "overfill/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace overfill {

PrunedDims compute_pruned_dims(std::size_t hidden_dim, std::size_t intermediate_dim, const PruneConfig& config) {
  auto keep = [&](std::size_t dim, double ratio, const char* name) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
      throw std::invalid_argument(std::string("pruning ratio ") + name + " must lie in [0, 1)");
    }
    // The epsilon absorbs representation error in (1 - P), e.g. 1 - 0.9.
    auto kept = static_cast<std::size_t>(std::floor((1.0 - ratio) * static_cast<double>(dim) + 1e-9));
    if (config.hardware_round_to > 0) kept -= kept % config.hardware_round_to;
    if (kept < 1) throw std::invalid_argument(std::string("pruning ") + name + " leaves no channels");
    return kept;
  };
  return {keep(hidden_dim, config.p_hidden, "p_hidden"), keep(intermediate_dim, config.p_intermediate, "p_intermediate")};
}

ModelConfig pruned_config(const ModelConfig& full, const PrunedDims& dims) {
  ModelConfig c = full;
  c.hidden_dim = dims.hidden;
  c.intermediate_dim = dims.intermediate;
  return c;
}

std::vector<TokenBatch> make_calibration_batches(std::span<const ChatExample> examples, const Tokenizer& tok,
                                                 const PruneConfig& config) {
  if (examples.empty()) throw std::invalid_argument("calibration needs at least one example");
  if (config.calib_batches == 0 || config.calib_batch_size == 0 || config.calib_seq_len == 0) {
    throw std::invalid_argument("calibration batch geometry must be positive");
  }
  std::vector<TokenBatch> out(config.calib_batches);
  std::size_t next = 0;
  std::vector<std::int32_t> stream;
  std::size_t cursor = 0;
  auto take = [&]() {
    while (stream.size() - cursor < config.calib_seq_len) {
      const auto fc = format_chat(examples[next++ % examples.size()], tok);
      stream.insert(stream.end(), fc.ids.begin(), fc.ids.end());
    }
    std::vector<std::int32_t> window(stream.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     stream.begin() + static_cast<std::ptrdiff_t>(cursor + config.calib_seq_len));
    cursor += config.calib_seq_len;
    return window;
  };
  for (auto& batch : out) {
    for (std::size_t i = 0; i < config.calib_batch_size; ++i) batch.push_back(take());
  }
  return out;
}

template <typename T>
ActivationStats<T> collect_activations(const Weights<T>& w, std::span<const TokenBatch> calib) {
  std::size_t sequences = 0, seq_len = 0;
  for (const auto& batch : calib) {
    for (const auto& seq : batch) {
      if (seq.empty()) throw std::invalid_argument("calibration sequence is empty");
      if (seq_len == 0) seq_len = seq.size();
      if (seq.size() != seq_len) throw DimensionError("calibration sequences must share one length");
      ++sequences;
    }
  }
  if (sequences == 0) throw std::invalid_argument("calibration set is empty");

  const ModelConfig& c = w.config;
  ActivationStats<T> stats;
  stats.sequences = sequences;
  stats.seq_len = seq_len;
  stats.layers.resize(c.n_layers);
  for (auto& l : stats.layers) {
    l.pre_attn = Tensor<T>({sequences, seq_len, c.hidden_dim});
    l.pre_ffn = Tensor<T>({sequences, seq_len, c.hidden_dim});
    l.ffn_inner = Tensor<T>({sequences, seq_len, c.intermediate_dim});
  }
  std::size_t index = 0;
  const ActivationHook<T> hook = [&](std::size_t layer, HookPoint point, const Tensor<T>& act) {
    auto& l = stats.layers[layer];
    Tensor<T>& dst = point == HookPoint::pre_attn ? l.pre_attn : point == HookPoint::pre_ffn ? l.pre_ffn : l.ffn_inner;
    std::copy(act.data(), act.data() + act.size(), dst.data() + index * act.size());
  };
  for (const auto& batch : calib) {
    for (const auto& seq : batch) {
      KVCache<T> cache(cache_shape(c));
      forward_tokens(w, std::span<const std::int32_t>(seq), cache, hook);
      ++index;
    }
  }
  return stats;
}

template <typename T>
std::vector<double> channel_scores(const Tensor<T>& a) {
  if (a.rank() != 3) throw DimensionError("activation tensor must be [batch x seq x dim], got " + to_string(a.shape()));
  const std::size_t batch = a.dim(0), seq = a.dim(1), dim = a.dim(2);
  std::vector<double> scores(dim, 0.0);
  std::vector<double> sumsq(dim);
  for (std::size_t s = 0; s < seq; ++s) {
    std::fill(sumsq.begin(), sumsq.end(), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* row = a.data() + (b * seq + s) * dim;
      for (std::size_t c = 0; c < dim; ++c) sumsq[c] += static_cast<double>(row[c]) * static_cast<double>(row[c]);
    }
    for (std::size_t c = 0; c < dim; ++c) scores[c] += std::sqrt(sumsq[c]);
  }
  for (double& v : scores) v /= static_cast<double>(seq);
  return scores;
}

template <typename T>
ImportanceScores score_channels(const ActivationStats<T>& stats) {
  if (stats.layers.empty()) throw std::invalid_argument("activation stats are empty");
  ImportanceScores out;
  out.hidden.assign(stats.layers.front().pre_attn.dim(2), 0.0);
  for (const auto& l : stats.layers) {
    const auto attn = channel_scores(l.pre_attn);
    const auto ffn = channel_scores(l.pre_ffn);
    for (std::size_t c = 0; c < out.hidden.size(); ++c) out.hidden[c] += attn[c] + ffn[c];
    out.inter.push_back(channel_scores(l.ffn_inner));
  }
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) {
    throw std::invalid_argument("cannot keep " + std::to_string(k) + " of " + std::to_string(scores.size()) +
                                " channels");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ChannelSelection select_channels(const ImportanceScores& scores, std::size_t hidden_keep, std::size_t inter_keep) {
  ChannelSelection sel;
  sel.hidden_idx = top_k_indices(scores.hidden, hidden_keep);
  for (const auto& s : scores.inter) sel.inter_idx.push_back(top_k_indices(s, inter_keep));
  return sel;
}

ChannelSelection identity_selection(const ModelConfig& config) {
  ChannelSelection sel;
  sel.hidden_idx.resize(config.hidden_dim);
  std::iota(sel.hidden_idx.begin(), sel.hidden_idx.end(), std::size_t{0});
  std::vector<std::size_t> inter(config.intermediate_dim);
  std::iota(inter.begin(), inter.end(), std::size_t{0});
  sel.inter_idx.assign(config.n_layers, inter);
  return sel;
}

namespace {

void check_indices(const std::vector<std::size_t>& idx, std::size_t limit, const std::string& what) {
  if (idx.empty()) throw std::invalid_argument(what + " selection is empty");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= limit) {
      throw std::invalid_argument(what + " index " + std::to_string(idx[i]) + " out of range " + std::to_string(limit));
    }
    if (i > 0 && idx[i] <= idx[i - 1]) throw std::invalid_argument(what + " indices must be strictly increasing");
  }
}

// out[r][c] = in[rows[r]][cols[c]]; an empty index list keeps that axis whole.
template <typename T>
Tensor<T> gather(const Tensor<T>& in, const std::vector<std::size_t>* rows, const std::vector<std::size_t>* cols) {
  const std::size_t in_cols = in.dim(1);
  const std::size_t nr = rows ? rows->size() : in.dim(0);
  const std::size_t nc = cols ? cols->size() : in_cols;
  Tensor<T> out({nr, nc});
  for (std::size_t r = 0; r < nr; ++r) {
    const std::size_t src_r = rows ? (*rows)[r] : r;
    for (std::size_t c = 0; c < nc; ++c) out[r * nc + c] = in[src_r * in_cols + (cols ? (*cols)[c] : c)];
  }
  return out;
}

template <typename T>
Tensor<T> gather_vec(const Tensor<T>& in, const std::vector<std::size_t>& idx) {
  Tensor<T> out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = in[idx[i]];
  return out;
}

}  // namespace

void validate_selection(const ChannelSelection& sel, const ModelConfig& full) {
  check_indices(sel.hidden_idx, full.hidden_dim, "hidden");
  if (sel.inter_idx.size() != full.n_layers) {
    throw std::invalid_argument("selection covers " + std::to_string(sel.inter_idx.size()) + " layers, model has " +
                                std::to_string(full.n_layers));
  }
  for (std::size_t l = 0; l < sel.inter_idx.size(); ++l) {
    check_indices(sel.inter_idx[l], full.intermediate_dim, "intermediate[" + std::to_string(l) + "]");
    if (sel.inter_idx[l].size() != sel.inter_idx.front().size()) {
      throw std::invalid_argument("every layer must keep the same number of intermediate channels");
    }
  }
}

template <typename T>
Weights<T> slice_model(const Weights<T>& w, const ChannelSelection& sel) {
  validate_selection(sel, w.config);
  const auto& h = sel.hidden_idx;
  Weights<T> out;
  out.config = pruned_config(w.config, {h.size(), sel.inter_idx.front().size()});
  out.token_embedding = gather(w.token_embedding, nullptr, &h);
  out.layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& a = w.layers[l];
    auto& b = out.layers[l];
    const auto& inter = sel.inter_idx[l];
    b.attn_norm = gather_vec(a.attn_norm, h);
    b.wq = gather(a.wq, &h, nullptr);
    b.wk = gather(a.wk, &h, nullptr);
    b.wv = gather(a.wv, &h, nullptr);
    b.wo = gather(a.wo, nullptr, &h);
    b.ffn_norm = gather_vec(a.ffn_norm, h);
    b.w_gate = gather(a.w_gate, &h, &inter);
    b.w_up = gather(a.w_up, &h, &inter);
    b.w_down = gather(a.w_down, &inter, &h);
  }
  out.final_norm = gather_vec(w.final_norm, h);
  if (!w.config.tied_embeddings) out.lm_head = gather(w.lm_head, &h, nullptr);
  return out;
}

nlohmann::ordered_json selection_to_json(const ChannelSelection& sel, const SelectionProvenance& prov) {
  nlohmann::ordered_json j;
  j["hidden_idx"] = sel.hidden_idx;
  j["inter_idx"] = sel.inter_idx;
  j["provenance"] = {{"calib_seed", prov.calib_seed}, {"p_hidden", prov.p_hidden}, {"p_intermediate", prov.p_intermediate}};
  return j;
}

ChannelSelection selection_from_json(const nlohmann::json& j) {
  ChannelSelection sel;
  sel.hidden_idx = j.at("hidden_idx").get<std::vector<std::size_t>>();
  sel.inter_idx = j.at("inter_idx").get<std::vector<std::vector<std::size_t>>>();
  return sel;
}

nlohmann::ordered_json scores_to_json(const ImportanceScores& scores) {
  nlohmann::ordered_json j;
  j["hidden_scores"] = scores.hidden;
  j["inter_scores"] = scores.inter;
  return j;
}

ImportanceScores scores_from_json(const nlohmann::json& j) {
  ImportanceScores s;
  s.hidden = j.at("hidden_scores").get<std::vector<double>>();
  s.inter = j.at("inter_scores").get<std::vector<std::vector<double>>>();
  return s;
}

template ActivationStats<float> collect_activations<float>(const Weights<float>&, std::span<const TokenBatch>);
template ActivationStats<double> collect_activations<double>(const Weights<double>&, std::span<const TokenBatch>);
template std::vector<double> channel_scores<float>(const Tensor<float>&);
template std::vector<double> channel_scores<double>(const Tensor<double>&);
template ImportanceScores score_channels<float>(const ActivationStats<float>&);
template ImportanceScores score_channels<double>(const ActivationStats<double>&);
template Weights<float> slice_model<float>(const Weights<float>&, const ChannelSelection&);
template Weights<double> slice_model<double>(const Weights<double>&, const ChannelSelection&);

}  // namespace overfill
