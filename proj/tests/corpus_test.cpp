#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <regex>

#include "overfill/corpus.hpp"
#include "overfill/rng.hpp"

using namespace overfill;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "overfill_corpus_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(TokenizerTest, RoundTripRandomBytes) {
  Tokenizer tok;
  CounterRng rng(2024);
  for (int i = 0; i < 10000; ++i) {
    std::string s(rng.below(40), '\0');
    for (char& ch : s) ch = static_cast<char>(rng.below(256));
    const auto ids = tok.encode(s);
    ASSERT_EQ(ids.size(), s.size());
    for (auto id : ids) ASSERT_FALSE(Tokenizer::is_special(id));
    ASSERT_EQ(tok.decode(ids), s);
  }
}

TEST(TokenizerTest, SpecialsRejected) {
  Tokenizer tok;
  const std::vector<std::int32_t> ids{65, Tokenizer::kEos};
  EXPECT_THROW(tok.decode(ids), std::invalid_argument);
  const std::vector<std::int32_t> neg{-1};
  EXPECT_THROW(tok.decode(neg), std::invalid_argument);
  EXPECT_EQ(Tokenizer::kVocabSize, 260u);
}

TEST(TaskTest, Deterministic) {
  EXPECT_EQ(gen_tasks(TaskKind::copy, 7, 2), gen_tasks(TaskKind::copy, 7, 2));
  EXPECT_NE(gen_tasks(TaskKind::copy, 7, 2), gen_tasks(TaskKind::copy, 8, 2));
  EXPECT_EQ(make_task(TaskKind::modadd, 3, 41), gen_tasks(TaskKind::modadd, 3, 50)[41]);
}

TEST(TaskTest, ModaddArithmetic) {
  for (std::size_t modulus : {2u, 11u, 97u}) {
    TaskOptions opt;
    opt.modulus = modulus;
    const std::regex re(R"((\d+)\+(\d+) mod (\d+)\?)");
    for (const auto& ex : gen_tasks(TaskKind::modadd, 5, 2000, opt)) {
      std::smatch m;
      ASSERT_TRUE(std::regex_match(ex.user, m, re)) << ex.user;
      const auto a = std::stoul(m[1]), b = std::stoul(m[2]), n = std::stoul(m[3]);
      ASSERT_EQ(n, modulus);
      ASSERT_LT(a, n);
      ASSERT_LT(b, n);
      ASSERT_EQ(ex.assistant, std::to_string((a + b) % n));
    }
  }
}

TEST(TaskTest, KvLookupAnswerIsQueriedValue) {
  TaskOptions opt;
  opt.kv_pairs = 5;
  opt.kv_value_len = 2;
  for (const auto& ex : gen_tasks(TaskKind::kvlookup, 9, 1000, opt)) {
    const auto q = ex.user.find('?');
    ASSERT_NE(q, std::string::npos);
    const char key = ex.user[q + 1];
    std::map<char, std::string> table;
    std::size_t i = 0;
    for (std::size_t p = 0; p < opt.kv_pairs; ++p) {
      ASSERT_EQ(ex.user[i + 1], '=');
      ASSERT_TRUE(table.emplace(ex.user[i], ex.user.substr(i + 2, 2)).second) << "duplicate key";
      i += 5;
    }
    ASSERT_EQ(ex.assistant, table.at(key));
  }
}

TEST(TaskTest, CopyAndReverse) {
  TaskOptions opt;
  opt.min_text_len = 2;
  opt.max_text_len = 4;
  for (const auto& ex : gen_tasks(TaskKind::reverse, 1, 200, opt)) {
    EXPECT_EQ(ex.assistant, std::string(ex.user.rbegin(), ex.user.rend()));
    EXPECT_GE(ex.user.size(), 2u);
    EXPECT_LE(ex.user.size(), 4u);
  }
  for (const auto& ex : gen_tasks(TaskKind::copy, 1, 200, opt)) EXPECT_EQ(ex.assistant, ex.user);
}

TEST(TaskTest, MixtureRoundRobin) {
  const std::vector<TaskKind> kinds{TaskKind::kvlookup, TaskKind::modadd};
  const auto mix = gen_mixture(kinds, 4, 6);
  for (std::size_t i = 0; i < mix.size(); ++i) {
    EXPECT_EQ(mix[i], make_task(kinds[i % 2], 4, i / 2));
  }
}

TEST(TaskTest, BadOptions) {
  TaskOptions opt;
  opt.modulus = 1;
  EXPECT_THROW(make_task(TaskKind::modadd, 0, 0, opt), std::invalid_argument);
  opt = TaskOptions{};
  opt.kv_pairs = 27;
  EXPECT_THROW(make_task(TaskKind::kvlookup, 0, 0, opt), std::invalid_argument);
  EXPECT_THROW(parse_task("sort"), std::invalid_argument);
  EXPECT_EQ(parse_task("kvlookup"), TaskKind::kvlookup);
}

TEST(FormatTest, TemplateLayout) {
  Tokenizer tok;
  const ChatExample ex{"", "hi", "yo", TaskKind::copy};
  const auto f = format_chat(ex, tok);
  std::vector<std::int32_t> expect{Tokenizer::kBos, 'S', ':', Tokenizer::kRoleSep, 'U', ':', 'h', 'i',
                                   Tokenizer::kRoleSep, 'A', ':', 'y', 'o', Tokenizer::kEos};
  EXPECT_EQ(f.ids, expect);
  EXPECT_EQ(f.prefill_len, 11u);
  EXPECT_EQ(format_prompt(ex, tok), std::vector<std::int32_t>(expect.begin(), expect.begin() + 11));
}

TEST(FormatTest, AssistantRegionRoundTrips) {
  Tokenizer tok;
  const std::vector<TaskKind> kinds{TaskKind::copy, TaskKind::reverse, TaskKind::modadd, TaskKind::kvlookup};
  for (const auto& ex : gen_mixture(kinds, 12, 400)) {
    const auto f = format_chat(ex, tok);
    ASSERT_LT(f.prefill_len, f.ids.size());
    ASSERT_EQ(f.ids.back(), Tokenizer::kEos);
    const std::span<const std::int32_t> y(f.ids.begin() + static_cast<std::ptrdiff_t>(f.prefill_len), f.ids.end() - 1);
    ASSERT_EQ(tok.decode(y), ex.assistant);
    ASSERT_EQ(f.ids.size(), format_prompt(ex, tok).size() + tok.encode(ex.assistant).size() + 1);
  }
}

TEST(DatasetTest, RoundTrip) {
  const auto path = temp_file("round.jsonl");
  const std::vector<TaskKind> kinds{TaskKind::kvlookup, TaskKind::modadd};
  auto ex = gen_mixture(kinds, 3, 25);
  ex[0].user = "quote \" and newline\n";
  write_dataset(path, {"kvlookup+modadd", 3, ex.size()}, ex);
  const auto ds = read_dataset(path);
  EXPECT_EQ(ds.header, (DatasetHeader{"kvlookup+modadd", 3, 25}));
  EXPECT_EQ(ds.examples, ex);
}

TEST(DatasetTest, Errors) {
  EXPECT_THROW(read_dataset(temp_file("absent.jsonl")), std::runtime_error);

  const auto bad = temp_file("bad.jsonl");
  std::ofstream(bad) << "{\"kind\":\"copy\",\"seed\":1,\"count\":1}\n{\"system\":\"copy\"}\n";
  try {
    read_dataset(bad);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos) << e.what();
  }

  const auto count = temp_file("count.jsonl");
  std::ofstream(count) << "{\"kind\":\"copy\",\"seed\":1,\"count\":2}\n"
                       << "{\"system\":\"copy\",\"user\":\"a\",\"assistant\":\"a\",\"task_kind\":\"copy\"}\n";
  EXPECT_THROW(read_dataset(count), std::runtime_error);
}
