#include "overfill/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "overfill/checkpoint.hpp"
#include "overfill/rng.hpp"

namespace overfill {

// ---- run config ---------------------------------------------------------------

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const nlohmann::json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
    if (!j_.is_object()) throw SchemaError(where(), "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void count(const std::string& key, std::size_t& out, std::size_t min = 0) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw SchemaError(at(key), "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
    if (out < min) throw SchemaError(at(key), "must be at least " + std::to_string(min));
  }

  void seed(const std::string& key, std::uint64_t& out) {
    std::size_t v = out;
    count(key, v);
    out = v;
  }

  void real(const std::string& key, double& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number()) throw SchemaError(at(key), "expected a number");
    out = v.get<double>();
  }

  void flag(const std::string& key, bool& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_boolean()) throw SchemaError(at(key), "expected a boolean");
    out = v.get<bool>();
  }

  void text(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_string()) throw SchemaError(at(key), "expected a string");
    out = v.get<std::string>();
  }

  void counts(const std::string& key, std::vector<std::size_t>& out, std::size_t min = 0) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_array() || v.empty()) throw SchemaError(at(key), "expected a non-empty array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto& e = v[i];
      if (!e.is_number_unsigned() || e.get<std::size_t>() < min) {
        throw SchemaError(at(key) + "/" + std::to_string(i), "expected an integer of at least " + std::to_string(min));
      }
      out.push_back(e.get<std::size_t>());
    }
  }

  Section sub(const std::string& key) { return Section(raw(key), at(key)); }

  std::string at(const std::string& key) const { return pointer_ + "/" + key; }
  std::string where() const { return pointer_.empty() ? "/" : pointer_; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw SchemaError(at(key), "unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string pointer_;
  std::set<std::string> seen_;
};

void read_model(Section s, ModelConfig& m) {
  s.count("vocab_size", m.vocab_size, 1);
  s.count("hidden_dim", m.hidden_dim, 1);
  s.count("n_layers", m.n_layers, 1);
  s.count("n_heads", m.n_heads, 1);
  s.count("n_kv_heads", m.n_kv_heads, 1);
  s.count("head_dim", m.head_dim, 1);
  s.count("intermediate_dim", m.intermediate_dim, 1);
  s.real("norm_eps", m.norm_eps);
  s.real("rope_theta", m.rope_theta);
  s.flag("tied_embeddings", m.tied_embeddings);
  s.finish();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(s.where(), e.what());
  }
}

void read_data(Section s, DataConfig& d) {
  if (s.has("tasks")) {
    const auto& v = s.raw("tasks");
    if (!v.is_array() || v.empty()) throw SchemaError(s.at("tasks"), "expected a non-empty array of task names");
    d.tasks.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string ptr = s.at("tasks") + "/" + std::to_string(i);
      if (!v[i].is_string()) throw SchemaError(ptr, "expected a task name");
      try {
        d.tasks.push_back(parse_task(v[i].get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw SchemaError(ptr, e.what());
      }
    }
  }
  s.count("train_examples", d.train_examples, 1);
  s.count("eval_examples", d.eval_examples, 1);
  s.count("modulus", d.options.modulus, 2);
  s.count("kv_pairs", d.options.kv_pairs, 1);
  s.count("kv_value_len", d.options.kv_value_len, 1);
  s.count("min_text_len", d.options.min_text_len, 1);
  s.count("max_text_len", d.options.max_text_len, 1);
  s.finish();
  if (d.options.kv_pairs > 26) throw SchemaError(s.at("kv_pairs"), "at most 26 keys are available");
  if (d.options.max_text_len < d.options.min_text_len) {
    throw SchemaError(s.at("max_text_len"), "must not be below min_text_len");
  }
}

void read_prune(Section s, PruneConfig& p) {
  s.real("p_hidden", p.p_hidden);
  s.real("p_intermediate", p.p_intermediate);
  s.count("calib_batches", p.calib_batches, 1);
  s.count("calib_batch_size", p.calib_batch_size, 1);
  s.count("calib_seq_len", p.calib_seq_len, 1);
  s.count("hardware_round_to", p.hardware_round_to);
  s.finish();
  for (const char* key : {"p_hidden", "p_intermediate"}) {
    const double v = std::string(key) == "p_hidden" ? p.p_hidden : p.p_intermediate;
    if (!(v >= 0.0 && v < 1.0)) throw SchemaError(s.at(key), "must lie in [0, 1)");
  }
}

void read_train(Section s, TrainConfig& t) {
  s.count("steps", t.steps, 1);
  s.count("batch_size", t.batch_size, 1);
  s.count("max_seq_len", t.max_seq_len, 2);
  s.real("lr", t.lr);
  s.real("warmup_ratio", t.warmup_ratio);
  s.count("checkpoint_every", t.checkpoint_every);
  s.finish();
  if (!(t.lr > 0)) throw SchemaError(s.at("lr"), "must be positive");
  if (!(t.warmup_ratio >= 0 && t.warmup_ratio <= 1)) throw SchemaError(s.at("warmup_ratio"), "must lie in [0, 1]");
}

void read_gen(Section s, GenParams& g) {
  s.count("max_new_tokens", g.max_new_tokens);
  s.real("temperature", g.temperature);
  std::size_t stop = static_cast<std::size_t>(g.stop_token);
  s.count("stop_token", stop);
  g.stop_token = static_cast<std::int32_t>(stop);
  s.flag("first_token_from_full", g.first_token_from_full);
  s.finish();
  if (!(g.temperature >= 0)) throw SchemaError(s.at("temperature"), "must be non-negative");
}

void read_bench(Section s, BenchConfig& b) {
  s.counts("prompt_lens", b.prompt_lens, 2);
  s.counts("new_tokens", b.new_tokens, 0);
  s.count("batch", b.batch, 1);
  s.count("repeats", b.repeats, 1);
  s.count("warmups", b.warmups);
  s.flag("attention_terms", b.attention_terms);
  if (s.has("hardware")) {
    Section h = s.sub("hardware");
    h.real("peak_flops", b.hardware.peak_flops);
    h.real("mem_bandwidth", b.hardware.mem_bandwidth);
    h.real("bytes_per_param", b.hardware.bytes_per_param);
    h.finish();
    try {
      b.hardware.validate();
    } catch (const std::invalid_argument& e) {
      throw SchemaError(h.where(), e.what());
    }
  }
  s.finish();
}

nlohmann::ordered_json train_to_json(const TrainConfig& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"max_seq_len", t.max_seq_len},
          {"lr", t.lr},
          {"warmup_ratio", t.warmup_ratio},
          {"checkpoint_every", t.checkpoint_every}};
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  if (j.is_object() && (j.contains("vocab_size") || j.contains("hidden_dim"))) {
    read_model(Section(j, ""), c.model);
    return c;
  }
  Section s(j, "");
  s.text("name", c.name);
  if (c.name.empty() || c.name.find('/') != std::string::npos) {
    throw SchemaError("/name", "must be a non-empty name without '/'");
  }
  s.seed("seed", c.seed);
  if (s.has("model")) read_model(s.sub("model"), c.model);
  if (s.has("data")) read_data(s.sub("data"), c.data);
  if (s.has("prune")) read_prune(s.sub("prune"), c.prune);
  if (s.has("base_train")) read_train(s.sub("base_train"), c.base_train);
  if (s.has("train")) read_train(s.sub("train"), c.train);
  if (s.has("gen")) read_gen(s.sub("gen"), c.gen);
  if (s.has("bench")) read_bench(s.sub("bench"), c.bench);
  s.finish();
  if (c.gen.stop_token < 0 || static_cast<std::size_t>(c.gen.stop_token) >= c.model.vocab_size) {
    throw SchemaError("/gen/stop_token", "outside the vocabulary");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["model"] = config_to_json(c.model);
  std::vector<std::string> tasks;
  for (TaskKind k : c.data.tasks) tasks.emplace_back(task_name(k));
  j["data"] = {{"tasks", tasks},
               {"train_examples", c.data.train_examples},
               {"eval_examples", c.data.eval_examples},
               {"modulus", c.data.options.modulus},
               {"kv_pairs", c.data.options.kv_pairs},
               {"kv_value_len", c.data.options.kv_value_len},
               {"min_text_len", c.data.options.min_text_len},
               {"max_text_len", c.data.options.max_text_len}};
  j["prune"] = {{"p_hidden", c.prune.p_hidden},
                {"p_intermediate", c.prune.p_intermediate},
                {"calib_batches", c.prune.calib_batches},
                {"calib_batch_size", c.prune.calib_batch_size},
                {"calib_seq_len", c.prune.calib_seq_len},
                {"hardware_round_to", c.prune.hardware_round_to}};
  j["base_train"] = train_to_json(c.base_train);
  j["train"] = train_to_json(c.train);
  j["gen"] = {{"max_new_tokens", c.gen.max_new_tokens},
              {"temperature", c.gen.temperature},
              {"stop_token", c.gen.stop_token},
              {"first_token_from_full", c.gen.first_token_from_full}};
  j["bench"] = {{"prompt_lens", c.bench.prompt_lens},
                {"new_tokens", c.bench.new_tokens},
                {"batch", c.bench.batch},
                {"repeats", c.bench.repeats},
                {"warmups", c.bench.warmups},
                {"attention_terms", c.bench.attention_terms},
                {"hardware",
                 {{"peak_flops", c.bench.hardware.peak_flops},
                  {"mem_bandwidth", c.bench.hardware.mem_bandwidth},
                  {"bytes_per_param", c.bench.hardware.bytes_per_param}}}};
  return j;
}

std::uint64_t stage_seed(std::uint64_t seed, SeedStream stream) {
  return CounterRng(seed, static_cast<std::uint64_t>(stream)).next_u64();
}

std::filesystem::path RunLayout::logs(const std::string& phase) const {
  return phase == "overfill" ? root / "logs.csv" : root / ("logs_" + phase + ".csv");
}

// ---- shared pipeline pieces ---------------------------------------------------

std::vector<TaskScore> exact_match(GenMode mode, const Weights<float>& full_w, const Weights<float>& decoder,
                                   std::span<const ChatExample> eval_set, const Tokenizer& tok, GenParams params) {
  std::vector<TaskScore> scores;
  auto slot = [&](TaskKind k) -> TaskScore& {
    for (auto& s : scores) {
      if (s.kind == k) return s;
    }
    scores.push_back({k, 0, 0});
    return scores.back();
  };
  for (const auto& ex : eval_set) {
    const auto prompt = format_prompt(ex, tok);
    const auto result = mode == GenMode::overfill ? overfill_generate(full_w, decoder, prompt, params)
                                                  : baseline_generate(decoder, prompt, params);
    TaskScore& s = slot(ex.task_kind);
    ++s.total;
    const bool stopped = !result.tokens.empty() && result.tokens.back() == params.stop_token;
    if (stopped && decode_answer(result.tokens, params.stop_token) == ex.assistant) ++s.correct;
  }
  return scores;
}

std::vector<ChatExample> calibration_sample(std::span<const ChatExample> train, const PruneConfig& config,
                                            std::uint64_t seed) {
  // Enough examples to fill every window once, at a conservative 8 tokens each.
  const std::size_t want = std::min(train.size(), config.calib_batches * config.calib_batch_size *
                                                      std::max<std::size_t>(1, config.calib_seq_len / 8));
  std::vector<ChatExample> out;
  for (std::size_t idx : batch_indices(train.size(), want, seed, 0)) out.push_back(train[idx]);
  return out;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) { write_file(path, text); }

Weights<float> need_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("missing file " + path.string());
  return load_checkpoint(path);
}

Dataset need_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("missing file " + path.string());
  return read_dataset(path);
}

struct Context {
  RunConfig config;
  RunLayout layout;
  Tokenizer tok;
  std::ostream& out;
};

std::string join_tasks(const std::vector<TaskKind>& kinds) {
  std::string s;
  for (TaskKind k : kinds) s += (s.empty() ? "" : "+") + std::string(task_name(k));
  return s;
}

void cmd_gen_data(Context& cx) {
  const auto& d = cx.config.data;
  const auto train_seed = stage_seed(cx.config.seed, SeedStream::train_data);
  const auto eval_seed = stage_seed(cx.config.seed, SeedStream::eval_data);
  const auto train = gen_mixture(d.tasks, train_seed, d.train_examples, d.options);
  const auto eval = gen_mixture(d.tasks, eval_seed, d.eval_examples, d.options);
  std::filesystem::create_directories(cx.layout.train_data().parent_path());
  write_dataset(cx.layout.train_data(), {join_tasks(d.tasks), train_seed, train.size()}, train);
  write_dataset(cx.layout.eval_data(), {join_tasks(d.tasks), eval_seed, eval.size()}, eval);
  write_text(cx.layout.config(), run_config_to_json(cx.config).dump(2) + "\n");
  cx.out << "wrote " << train.size() << " training and " << eval.size() << " eval examples to "
         << cx.layout.train_data().parent_path().string() << "\n";
}

void write_log(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  std::string s = "step,lr,loss,tokens_seen\n";
  for (const auto& r : rows) {
    s += std::to_string(r.step) + "," + fmt(r.lr) + "," + fmt(r.loss) + "," + std::to_string(r.tokens_seen) + "\n";
  }
  write_text(path, s);
}

std::vector<LogRow> run_training(Context& cx, TrainMode mode, const Weights<float>* prefill, Weights<float>& model,
                                 const TrainConfig& tc, const std::string& phase) {
  const auto data = need_dataset(cx.layout.train_data());
  TrainCallbacks cb;
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 10);
  cb.on_step = [&](const LogRow& r) {
    if (r.step % every == 0 || r.step == tc.steps) {
      cx.out << phase << " step " << r.step << "/" << tc.steps << " loss " << fmt(r.loss) << "\n";
    }
  };
  cb.on_checkpoint = [&](std::size_t step) {
    save_checkpoint(cx.layout.checkpoints() / (phase + "_step" + std::to_string(step) + ".ovfl"), model);
  };
  return train(mode, prefill, model, std::span<const ChatExample>(data.examples), cx.tok, tc, cb);
}

void cmd_train_base(Context& cx) {
  TrainConfig tc = cx.config.base_train;
  tc.seed = stage_seed(cx.config.seed, SeedStream::base_order);
  auto w = init_model<float>(cx.config.model, stage_seed(cx.config.seed, SeedStream::init));
  const auto log = run_training(cx, TrainMode::standalone, nullptr, w, tc, "base");
  save_checkpoint(cx.layout.full_ckpt(), w);
  write_log(cx.layout.logs("base"), log);
  cx.out << "saved " << cx.layout.full_ckpt().string() << "\n";
}

void cmd_calibrate(Context& cx) {
  const auto full = need_checkpoint(cx.layout.full_ckpt());
  const auto data = need_dataset(cx.layout.train_data());
  const auto sample =
      calibration_sample(data.examples, cx.config.prune, stage_seed(cx.config.seed, SeedStream::calibration));
  const auto batches = make_calibration_batches(sample, cx.tok, cx.config.prune);
  const auto stats = collect_activations(full, std::span<const TokenBatch>(batches));
  write_text(cx.layout.scores(), scores_to_json(score_channels(stats)).dump() + "\n");
  cx.out << "scored " << stats.sequences << " calibration windows of " << stats.seq_len << " tokens\n";
}

void cmd_prune(Context& cx) {
  const auto full = need_checkpoint(cx.layout.full_ckpt());
  if (!std::filesystem::exists(cx.layout.scores())) {
    throw std::runtime_error("missing file " + cx.layout.scores().string());
  }
  ImportanceScores scores;
  try {
    scores = scores_from_json(nlohmann::json::parse(read_file(cx.layout.scores())));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(cx.layout.scores().string() + ": " + e.what());
  }
  const auto dims = compute_pruned_dims(full.config.hidden_dim, full.config.intermediate_dim, cx.config.prune);
  const auto sel = select_channels(scores, dims.hidden, dims.intermediate);
  const auto pruned = slice_model(full, sel);
  const SelectionProvenance prov{stage_seed(cx.config.seed, SeedStream::calibration), cx.config.prune.p_hidden,
                                 cx.config.prune.p_intermediate};
  write_text(cx.layout.selection(), selection_to_json(sel, prov).dump() + "\n");
  save_checkpoint(cx.layout.pruned_init_ckpt(), pruned);
  cx.out << "pruned D " << full.config.hidden_dim << " -> " << dims.hidden << ", I " << full.config.intermediate_dim
         << " -> " << dims.intermediate << "; params " << param_count(full.config) << " -> "
         << param_count(pruned.config) << "\n";
}

void cmd_train_overfill(Context& cx, bool standalone) {
  auto full = need_checkpoint(cx.layout.full_ckpt());
  full.frozen = true;
  auto pruned = need_checkpoint(cx.layout.pruned_init_ckpt());
  pruned.frozen = false;
  TrainConfig tc = cx.config.train;
  tc.seed = stage_seed(cx.config.seed, SeedStream::train_order);
  const std::string phase = standalone ? "standalone" : "overfill";
  const auto log = standalone ? run_training(cx, TrainMode::standalone, nullptr, pruned, tc, phase)
                              : run_training(cx, TrainMode::overfill, &full, pruned, tc, phase);
  const auto path = standalone ? cx.layout.standalone_ckpt() : cx.layout.overfill_ckpt();
  save_checkpoint(path, pruned);
  write_log(cx.layout.logs(phase), log);
  cx.out << "saved " << path.string() << "\n";
}

// The decoder used by `generate` and `bench`: trained weights when present,
// the freshly sliced ones otherwise.
std::filesystem::path decoder_path(const RunLayout& layout, GenMode mode) {
  const auto trained = mode == GenMode::pruned ? layout.standalone_ckpt() : layout.overfill_ckpt();
  return std::filesystem::exists(trained) ? trained : layout.pruned_init_ckpt();
}

void cmd_generate(Context& cx, GenMode mode, const std::string& system, const std::string& user,
                  const std::string& pruned_override) {
  const auto full = need_checkpoint(cx.layout.full_ckpt());
  ChatExample ex{system, user, "", TaskKind::copy};
  const auto prompt = format_prompt(ex, cx.tok);
  GenParams params = cx.config.gen;
  params.seed = stage_seed(cx.config.seed, SeedStream::generate);
  GenResult<float> result;
  if (mode == GenMode::full) {
    result = baseline_generate(full, prompt, params);
  } else {
    const auto dec = need_checkpoint(pruned_override.empty() ? decoder_path(cx.layout, mode) : std::filesystem::path(pruned_override));
    result = mode == GenMode::overfill ? overfill_generate(full, dec, prompt, params)
                                       : baseline_generate(dec, prompt, params);
  }
  cx.out << decode_answer(result.tokens, params.stop_token) << "\n";
}

void cmd_eval(Context& cx, std::size_t profile_positions) {
  const auto full = need_checkpoint(cx.layout.full_ckpt());
  const auto eval = need_dataset(cx.layout.eval_data());
  GenParams params = cx.config.gen;
  params.temperature = 0.0;
  std::string csv = "mode,task,correct,total,exact_match\n";
  auto report = [&](GenMode mode, const Weights<float>& dec) {
    for (const auto& s : exact_match(mode, full, dec, eval.examples, cx.tok, params)) {
      csv += std::string(mode_name(mode)) + "," + std::string(task_name(s.kind)) + "," + std::to_string(s.correct) +
             "," + std::to_string(s.total) + "," + fmt(s.percent()) + "\n";
      cx.out << mode_name(mode) << " " << task_name(s.kind) << " " << fmt(s.percent()) << "% (" << s.correct << "/"
             << s.total << ")\n";
    }
  };
  report(GenMode::full, full);
  std::optional<Weights<float>> overfill_w, standalone_w;
  if (std::filesystem::exists(cx.layout.overfill_ckpt())) {
    overfill_w = load_checkpoint(cx.layout.overfill_ckpt());
    report(GenMode::overfill, *overfill_w);
  }
  if (std::filesystem::exists(cx.layout.standalone_ckpt())) {
    standalone_w = load_checkpoint(cx.layout.standalone_ckpt());
    report(GenMode::pruned, *standalone_w);
  }
  write_text(cx.layout.eval_csv(), csv);

  if (profile_positions == 0) return;
  std::string prof = "task,mode,position,mean_prob,count\n";
  for (TaskKind kind : cx.config.data.tasks) {
    std::vector<ChatExample> subset;
    for (const auto& ex : eval.examples) {
      if (ex.task_kind == kind) subset.push_back(ex);
    }
    if (subset.empty()) continue;
    auto add = [&](GenMode mode, const Weights<float>& prefill_w, const Weights<float>& dec) {
      const auto p = position_prob_profile(prefill_w, dec, std::span<const ChatExample>(subset), cx.tok,
                                           profile_positions);
      for (std::size_t i = 0; i < p.mean_prob.size(); ++i) {
        if (p.count[i] == 0) continue;
        prof += std::string(task_name(kind)) + "," + std::string(mode_name(mode)) + "," + std::to_string(i + 1) + "," +
                fmt(p.mean_prob[i]) + "," + std::to_string(p.count[i]) + "\n";
      }
    };
    add(GenMode::full, full, full);
    if (overfill_w) add(GenMode::overfill, full, *overfill_w);
    if (standalone_w) add(GenMode::pruned, *standalone_w, *standalone_w);
  }
  write_text(cx.layout.profile_csv(), prof);
}

void cmd_param_count(Context& cx) {
  const auto& m = cx.config.model;
  const std::size_t full = param_count(m);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", static_cast<double>(full));
  cx.out << "params " << full << " (" << buf << ")\n";
  const auto& p = cx.config.prune;
  if (p.p_hidden > 0 || p.p_intermediate > 0) {
    const auto dims = compute_pruned_dims(m.hidden_dim, m.intermediate_dim, p);
    const std::size_t pruned = param_count(pruned_config(m, dims));
    std::snprintf(buf, sizeof buf, "%.3g", static_cast<double>(pruned));
    cx.out << "pruned D' " << dims.hidden << " I' " << dims.intermediate << " params " << pruned << " (" << buf
           << ")\n";
  }
}

constexpr GenMode kAllModes[] = {GenMode::full, GenMode::pruned, GenMode::overfill};

void cmd_bench(Context& cx) {
  const auto full = need_checkpoint(cx.layout.full_ckpt());
  const auto dec = need_checkpoint(decoder_path(cx.layout, GenMode::overfill));
  const auto& b = cx.config.bench;
  std::ostringstream csv;
  write_cost_csv_header(csv);
  for (std::size_t m : b.prompt_lens) {
    for (std::size_t n : b.new_tokens) {
      BenchOptions opt{b.repeats, b.warmups, cx.config.seed};
      for (const auto& r : bench_wallclock(full, dec, m, n, b.batch, kAllModes, opt)) {
        write_cost_csv_row(csv, r);
        cx.out << mode_name(r.mode) << " M " << m << " N " << n << " prefill " << fmt(r.prefill_s) << "s decode "
               << fmt(r.decode_s) << "s\n";
      }
    }
  }
  write_text(cx.layout.bench_csv(), csv.str());
}

void cmd_roofline(Context& cx) {
  const auto& m = cx.config.model;
  const auto dims = compute_pruned_dims(m.hidden_dim, m.intermediate_dim, cx.config.prune);
  const ModelConfig pruned = pruned_config(m, dims);
  const auto& b = cx.config.bench;
  std::ostringstream csv;
  write_cost_csv_header(csv);
  for (std::size_t len : b.prompt_lens) {
    for (std::size_t n : b.new_tokens) {
      for (GenMode mode : kAllModes) {
        const auto r = roofline_estimate(b.hardware, m, pruned, len, n, b.batch, mode, {b.attention_terms});
        write_cost_csv_row(csv, r);
      }
    }
  }
  write_text(cx.layout.roofline_csv(), csv.str());
  cx.out << csv.str();
}

std::size_t thread_cap() {
  const char* env = std::getenv("OVERFILL_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw UsageError("OVERFILL_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"OverFill: full-model prefill, pruned-model decode"};
  app.require_subcommand(1);

  std::string config_path, out_dir, system = "", user, pruned_override, mode_text = "overfill";
  std::optional<std::uint64_t> seed;
  std::optional<double> p_hidden, p_inter;
  bool standalone = false;
  std::size_t profile_positions = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config JSON")->required();
    sub->add_option("--out", out_dir, "run directory (default runs/<name>)");
    sub->add_option("--seed", seed, "override the config seed");
  };
  std::map<std::string, CLI::App*> subs;
  for (const char* name : {"gen-data", "train-base", "calibrate", "prune", "train-overfill", "generate", "eval",
                           "param-count", "bench", "roofline"}) {
    subs[name] = app.add_subcommand(name);
    common(subs[name]);
  }
  subs["gen-data"]->description("generate the synthetic training and eval sets");
  subs["train-base"]->description("fit the full model on the training set");
  subs["calibrate"]->description("score channels on calibration activations");
  subs["prune"]->description("select channels and slice the full model");
  subs["prune"]->add_option("--p-hidden", p_hidden, "hidden pruning ratio");
  subs["prune"]->add_option("--p-inter", p_inter, "intermediate pruning ratio");
  subs["train-overfill"]->description("train the pruned decoder on the frozen full model's cache");
  subs["train-overfill"]->add_flag("--standalone", standalone, "train the pruned model alone (baseline)");
  subs["generate"]->description("answer one prompt");
  subs["generate"]->add_option("--mode", mode_text, "full | pruned | overfill")->check(
      CLI::IsMember({"full", "pruned", "overfill"}));
  subs["generate"]->add_option("--system", system, "system text");
  subs["generate"]->add_option("--user", user, "user text")->required();
  subs["generate"]->add_option("--pruned", pruned_override, "decoder checkpoint to use");
  subs["eval"]->description("exact match per task and mode");
  subs["eval"]->add_option("--profile", profile_positions, "also write per-position probabilities up to this position");
  subs["param-count"]->description("count parameters of the configured model");
  subs["bench"]->description("time prefill and decode of this implementation");
  subs["roofline"]->description("analytic prefill/decode latency estimate");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    thread_cap();
    Context cx{load_run_config(config_path), {}, {}, out};
    if (seed) cx.config.seed = *seed;
    if (p_hidden) cx.config.prune.p_hidden = *p_hidden;
    if (p_inter) cx.config.prune.p_intermediate = *p_inter;
    cx.layout.root = out_dir.empty() ? std::filesystem::path("runs") / cx.config.name : std::filesystem::path(out_dir);

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "gen-data") cmd_gen_data(cx);
    else if (name == "train-base") cmd_train_base(cx);
    else if (name == "calibrate") cmd_calibrate(cx);
    else if (name == "prune") cmd_prune(cx);
    else if (name == "train-overfill") cmd_train_overfill(cx, standalone);
    else if (name == "generate") cmd_generate(cx, parse_mode(mode_text), system, user, pruned_override);
    else if (name == "eval") cmd_eval(cx, profile_positions);
    else if (name == "param-count") cmd_param_count(cx);
    else if (name == "bench") cmd_bench(cx);
    else if (name == "roofline") cmd_roofline(cx);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace overfill
