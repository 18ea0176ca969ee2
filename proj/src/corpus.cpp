#include "overfill/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "overfill/rng.hpp"

namespace overfill {

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  return ids;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || id > 255) throw std::invalid_argument("cannot decode non-byte token " + std::to_string(id));
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string_view task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::modadd: return "modadd";
    case TaskKind::kvlookup: return "kvlookup";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view name) {
  for (TaskKind k : {TaskKind::copy, TaskKind::reverse, TaskKind::modadd, TaskKind::kvlookup}) {
    if (task_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown task kind '" + std::string(name) + "'");
}

namespace {

std::string random_letters(CounterRng& rng, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + rng.below(26)));
  return s;
}

std::string random_digits(CounterRng& rng, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('0' + rng.below(10)));
  return s;
}

}  // namespace

ChatExample make_task(TaskKind kind, std::uint64_t seed, std::uint64_t index, const TaskOptions& opt) {
  CounterRng rng(seed, (static_cast<std::uint64_t>(kind) << 40) ^ index);
  ChatExample ex;
  ex.task_kind = kind;
  switch (kind) {
    case TaskKind::copy:
    case TaskKind::reverse: {
      if (opt.min_text_len == 0 || opt.max_text_len < opt.min_text_len) {
        throw std::invalid_argument("text length range must be non-empty and start above zero");
      }
      const std::size_t len = opt.min_text_len + rng.below(opt.max_text_len - opt.min_text_len + 1);
      const std::string text = random_letters(rng, len);
      ex.system = kind == TaskKind::copy ? "copy" : "reverse";
      ex.user = text;
      ex.assistant = kind == TaskKind::copy ? text : std::string(text.rbegin(), text.rend());
      break;
    }
    case TaskKind::modadd: {
      if (opt.modulus < 2) throw std::invalid_argument("modulus must be at least 2");
      const std::uint64_t a = rng.below(opt.modulus);
      const std::uint64_t b = rng.below(opt.modulus);
      ex.system = "add";
      ex.user = std::to_string(a) + "+" + std::to_string(b) + " mod " + std::to_string(opt.modulus) + "?";
      ex.assistant = std::to_string((a + b) % opt.modulus);
      break;
    }
    case TaskKind::kvlookup: {
      if (opt.kv_pairs == 0 || opt.kv_pairs > 26 || opt.kv_value_len == 0) {
        throw std::invalid_argument("kvlookup needs 1..26 pairs and non-empty values");
      }
      // Distinct single-letter keys via a partial Fisher-Yates shuffle.
      std::vector<char> letters(26);
      std::iota(letters.begin(), letters.end(), 'a');
      for (std::size_t i = 0; i < opt.kv_pairs; ++i) {
        std::swap(letters[i], letters[i + rng.below(26 - i)]);
      }
      std::vector<std::string> values;
      for (std::size_t i = 0; i < opt.kv_pairs; ++i) values.push_back(random_digits(rng, opt.kv_value_len));
      const std::size_t query = rng.below(opt.kv_pairs);
      std::string user;
      for (std::size_t i = 0; i < opt.kv_pairs; ++i) {
        user += letters[i];
        user += '=';
        user += values[i];
        user += ' ';
      }
      user += '?';
      user += letters[query];
      ex.system = "lookup";
      ex.user = std::move(user);
      ex.assistant = values[query];
      break;
    }
  }
  return ex;
}

std::vector<ChatExample> gen_tasks(TaskKind kind, std::uint64_t seed, std::size_t n, const TaskOptions& options) {
  if (n == 0) throw std::invalid_argument("gen_tasks needs n > 0");
  std::vector<ChatExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_task(kind, seed, i, options));
  return out;
}

std::vector<ChatExample> gen_mixture(std::span<const TaskKind> kinds, std::uint64_t seed, std::size_t n,
                                     const TaskOptions& options) {
  if (kinds.empty() || n == 0) throw std::invalid_argument("gen_mixture needs task kinds and n > 0");
  std::vector<ChatExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_task(kinds[i % kinds.size()], seed, i / kinds.size(), options));
  return out;
}

namespace {

void append_text(std::vector<std::int32_t>& ids, const Tokenizer& tok, std::string_view text) {
  const auto enc = tok.encode(text);
  ids.insert(ids.end(), enc.begin(), enc.end());
}

}  // namespace

std::vector<std::int32_t> format_prompt(const ChatExample& ex, const Tokenizer& tok) {
  std::vector<std::int32_t> ids{Tokenizer::kBos};
  append_text(ids, tok, "S:");
  append_text(ids, tok, ex.system);
  ids.push_back(Tokenizer::kRoleSep);
  append_text(ids, tok, "U:");
  append_text(ids, tok, ex.user);
  ids.push_back(Tokenizer::kRoleSep);
  append_text(ids, tok, "A:");
  return ids;
}

FormattedChat format_chat(const ChatExample& ex, const Tokenizer& tok) {
  FormattedChat out;
  out.ids = format_prompt(ex, tok);
  out.prefill_len = out.ids.size();
  append_text(out.ids, tok, ex.assistant);
  out.ids.push_back(Tokenizer::kEos);
  return out;
}

// ---- dataset files ----------------------------------------------------------

void write_dataset(const std::filesystem::path& path, const DatasetHeader& header,
                   std::span<const ChatExample> examples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  nlohmann::ordered_json h;
  h["kind"] = header.kind;
  h["seed"] = header.seed;
  h["count"] = header.count;
  os << h.dump() << '\n';
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["system"] = ex.system;
    j["user"] = ex.user;
    j["assistant"] = ex.assistant;
    j["task_kind"] = std::string(task_name(ex.task_kind));
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (line_no == 1) {
        ds.header.kind = j.at("kind").get<std::string>();
        ds.header.seed = j.at("seed").get<std::uint64_t>();
        ds.header.count = j.at("count").get<std::size_t>();
        continue;
      }
      ChatExample ex;
      ex.system = j.at("system").get<std::string>();
      ex.user = j.at("user").get<std::string>();
      ex.assistant = j.at("assistant").get<std::string>();
      ex.task_kind = parse_task(j.at("task_kind").get<std::string>());
      if (ex.assistant.empty()) fail("assistant text is empty");
      ds.examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
  if (line_no == 0) throw std::runtime_error(path.string() + ": empty dataset file");
  if (ds.examples.size() != ds.header.count) {
    throw std::runtime_error(path.string() + ": header count " + std::to_string(ds.header.count) + " but " +
                             std::to_string(ds.examples.size()) + " examples");
  }
  return ds;
}

}  // namespace overfill
