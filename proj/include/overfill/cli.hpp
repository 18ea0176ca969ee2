#pragma once

// The `overfill` command line: one subcommand per pipeline stage, all driven
// by a single JSON run config.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "overfill/corpus.hpp"
#include "overfill/engine.hpp"
#include "overfill/model.hpp"
#include "overfill/perfmodel.hpp"
#include "overfill/pruner.hpp"
#include "overfill/trainer.hpp"

namespace overfill {

/// A config error pinned to a JSON pointer inside the run config.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& pointer, const std::string& what)
      : std::runtime_error(pointer + ": " + what), pointer_(pointer) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

struct DataConfig {
  std::vector<TaskKind> tasks{TaskKind::kvlookup, TaskKind::modadd};
  std::size_t train_examples = 20000;
  std::size_t eval_examples = 200;
  TaskOptions options;
};

struct BenchConfig {
  std::vector<std::size_t> prompt_lens{32};
  std::vector<std::size_t> new_tokens{64, 128, 256, 512, 1024};
  std::size_t batch = 1;
  std::size_t repeats = 10;
  std::size_t warmups = 2;
  HardwareSpec hardware;
  bool attention_terms = true;
};

struct RunConfig {
  std::string name = "desk";
  std::uint64_t seed = 0;
  ModelConfig model;
  DataConfig data;
  PruneConfig prune;
  TrainConfig base_train;  // fits the full model
  TrainConfig train;       // OverFill and the standalone pruned baseline
  GenParams gen;
  BenchConfig bench;
};

/// Accepts a full run config or a bare model config (as in ref/*.json).
/// Every section is optional; keys inside a section are validated and unknown
/// keys are rejected.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::ordered_json run_config_to_json(const RunConfig& config);

/// Sub-seed for one pipeline stage, derived from the top-level seed.
enum class SeedStream : std::uint64_t { train_data = 1, eval_data, init, base_order, calibration, train_order, generate };
std::uint64_t stage_seed(std::uint64_t seed, SeedStream stream);

/// Files of one run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path train_data() const { return root / "data" / "train.jsonl"; }
  std::filesystem::path eval_data() const { return root / "data" / "eval.jsonl"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path full_ckpt() const { return checkpoints() / "full.ovfl"; }
  std::filesystem::path pruned_init_ckpt() const { return checkpoints() / "pruned_init.ovfl"; }
  std::filesystem::path overfill_ckpt() const { return checkpoints() / "overfill.ovfl"; }
  std::filesystem::path standalone_ckpt() const { return checkpoints() / "standalone.ovfl"; }
  std::filesystem::path scores() const { return root / "scores.json"; }
  std::filesystem::path selection() const { return root / "selection.json"; }
  std::filesystem::path logs(const std::string& phase) const;
  std::filesystem::path eval_csv() const { return root / "eval.csv"; }
  std::filesystem::path profile_csv() const { return root / "profile.csv"; }
  std::filesystem::path bench_csv() const { return root / "bench.csv"; }
  std::filesystem::path roofline_csv() const { return root / "roofline.csv"; }
};

struct TaskScore {
  TaskKind kind = TaskKind::copy;
  std::size_t correct = 0;
  std::size_t total = 0;
  double percent() const { return total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Greedy exact match per task kind. `full_w` prefills in overfill mode; in
/// the other modes `decoder` runs alone.
std::vector<TaskScore> exact_match(GenMode mode, const Weights<float>& full_w, const Weights<float>& decoder,
                                   std::span<const ChatExample> eval_set, const Tokenizer& tok, GenParams params);

/// Calibration examples: a seeded sample of the training set.
std::vector<ChatExample> calibration_sample(std::span<const ChatExample> train, const PruneConfig& config,
                                            std::uint64_t seed);

/// Runs the command line. Returns 0 on success, 1 on a usage error and 2 on
/// a data or format error. Messages go to `out` and `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace overfill
