#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace overfill {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four
/// specials that no text ever maps to.
class Tokenizer {
 public:
  static constexpr std::int32_t kBos = 256;
  static constexpr std::int32_t kEos = 257;
  static constexpr std::int32_t kRoleSep = 258;
  static constexpr std::int32_t kPad = 259;
  static constexpr std::size_t kVocabSize = 260;

  std::vector<std::int32_t> encode(std::string_view text) const;
  /// Inverse of encode. Special ids are rejected.
  std::string decode(std::span<const std::int32_t> ids) const;
  static bool is_special(std::int32_t id) noexcept { return id >= kBos; }
};

enum class TaskKind { copy, reverse, modadd, kvlookup };

std::string_view task_name(TaskKind kind);
/// Throws std::invalid_argument on an unknown name.
TaskKind parse_task(std::string_view name);

struct ChatExample {
  std::string system;
  std::string user;
  std::string assistant;
  TaskKind task_kind = TaskKind::copy;

  bool operator==(const ChatExample&) const = default;
};

struct TaskOptions {
  std::size_t modulus = 97;
  std::size_t kv_pairs = 6;
  std::size_t kv_value_len = 3;
  std::size_t min_text_len = 3;
  std::size_t max_text_len = 8;
};

/// Example `index` of `kind` under `seed`; a pure function of its arguments.
ChatExample make_task(TaskKind kind, std::uint64_t seed, std::uint64_t index, const TaskOptions& options = {});

std::vector<ChatExample> gen_tasks(TaskKind kind, std::uint64_t seed, std::size_t n, const TaskOptions& options = {});

/// Round-robin over `kinds`: item i is make_task(kinds[i % k], seed, i / k).
std::vector<ChatExample> gen_mixture(std::span<const TaskKind> kinds, std::uint64_t seed, std::size_t n,
                                     const TaskOptions& options = {});

struct FormattedChat {
  std::vector<std::int32_t> ids;
  /// Number of prompt tokens M. ids[0..M) are the prompt (ending with the
  /// assistant tag); ids[M..) are the assistant text and EOS.
  std::size_t prefill_len = 0;
};

/// BOS "S:" system SEP "U:" user SEP "A:" assistant EOS
FormattedChat format_chat(const ChatExample& ex, const Tokenizer& tok);

/// The prompt part only, for generation.
std::vector<std::int32_t> format_prompt(const ChatExample& ex, const Tokenizer& tok);

// ---- dataset files ----------------------------------------------------------

struct DatasetHeader {
  std::string kind;
  std::uint64_t seed = 0;
  std::size_t count = 0;

  bool operator==(const DatasetHeader&) const = default;
};

/// JSON lines: one header object, then one ChatExample per line.
void write_dataset(const std::filesystem::path& path, const DatasetHeader& header,
                   std::span<const ChatExample> examples);

struct Dataset {
  DatasetHeader header;
  std::vector<ChatExample> examples;
};

/// Throws std::runtime_error naming the file and line on malformed input.
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace overfill
