#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "overfill/checkpoint.hpp"
#include "overfill/perfmodel.hpp"
#include "overfill/pruner.hpp"

using namespace overfill;

namespace {

ModelConfig load_ref(const std::string& name) {
  return config_from_json(nlohmann::json::parse(read_file(std::filesystem::path(OVERFILL_SOURCE_DIR) / "ref" / name)));
}

ModelConfig pruned_ref(const ModelConfig& full, std::size_t d, std::size_t i) { return pruned_config(full, {d, i}); }

// Counted by hand from the tensor shapes.
double manual_count(const ModelConfig& c) {
  const double d = c.hidden_dim, v = c.vocab_size, q = c.n_heads * c.head_dim, kv = c.n_kv_heads * c.head_dim,
               i = c.intermediate_dim;
  const double layer = d + d * q + 2 * d * kv + q * d + d + 3 * d * i;
  return v * d * (c.tied_embeddings ? 1 : 2) + c.n_layers * layer + d;
}

double slope_r2(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) mx += x[k] / n, my += y[k] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
    syy += (y[k] - my) * (y[k] - my);
  }
  return sxy * sxy / (sxx * syy);
}

}  // namespace

TEST(ParamCountTest, MatchesManualAndAllocated) {
  for (const char* name : {"llama1b.json", "llama3b.json", "llama8b.json"}) {
    const auto c = load_ref(name);
    EXPECT_DOUBLE_EQ(static_cast<double>(param_count(c)), manual_count(c)) << name;
  }
  for (bool tied : {false, true}) {
    ModelConfig c;
    c.tied_embeddings = tied;
    EXPECT_EQ(param_count(c), init_model<float>(c, 1).allocated_params());
  }
}

TEST(ParamCountTest, PaperModelSizes) {
  const auto b3 = load_ref("llama3b.json"), b8 = load_ref("llama8b.json");
  const struct {
    ModelConfig config;
    double billions;
  } rows[] = {
      {b3, 3.21},
      {b8, 8.03},
      {load_ref("llama1b.json"), 1.24},
      {pruned_ref(b3, 921, 2457), 0.52},
      {pruned_ref(b3, 1689, 4505), 1.24},
      {pruned_ref(b3, 2304, 6144), 2.01},
      {pruned_ref(b8, 2334, 8171), 3.19},
      {pruned_ref(b3, 1792, 4096), 1.26},
      {pruned_ref(b8, 2432, 7680), 3.21},
  };
  for (const auto& r : rows) {
    const double got = static_cast<double>(param_count(r.config)) / 1e9;
    EXPECT_NEAR(got / r.billions, 1.0, 0.01) << r.config.hidden_dim << " " << got;
  }
}

TEST(ParamCountTest, SliceMatchesPrunedConfig) {
  const ModelConfig c;
  const auto w = init_model<float>(c, 2);
  ChannelSelection sel;
  for (std::size_t i = 0; i < 40; ++i) sel.hidden_idx.push_back(i);
  sel.inter_idx.assign(c.n_layers, {});
  for (auto& v : sel.inter_idx) {
    for (std::size_t i = 0; i < 90; ++i) v.push_back(i * 2);
  }
  const auto p = slice_model(w, sel);
  EXPECT_EQ(p.allocated_params(), param_count(pruned_config(c, {40, 90})));
  EXPECT_EQ(p.config, pruned_config(c, {40, 90}));
}

TEST(RooflineTest, ClosedFormWithoutAttention) {
  const HardwareSpec hw;
  const auto full = load_ref("llama3b.json");
  const auto small = pruned_ref(full, 1689, 4505);
  RooflineOptions opt;
  opt.attention_terms = false;
  const double pf = param_count(full), ps = param_count(small);
  const std::size_t m = 100, n = 50, b = 2;
  const auto r = roofline_estimate(hw, full, small, m, n, b, GenMode::overfill, opt);
  EXPECT_NEAR(r.prefill_s, 2 * pf * m * b / hw.peak_flops, 1e-15);
  const double step = std::max(ps * hw.bytes_per_param / hw.mem_bandwidth, 2 * ps * b / hw.peak_flops);
  EXPECT_NEAR(r.decode_s, n * step, 1e-12);
  EXPECT_DOUBLE_EQ(r.total_s, r.prefill_s + r.decode_s);
  EXPECT_EQ(r.params, param_count(small));

  const auto pr = roofline_estimate(hw, full, small, m, n, b, GenMode::pruned, opt);
  EXPECT_NEAR(pr.prefill_s, 2 * ps * m * b / hw.peak_flops, 1e-15);
  EXPECT_DOUBLE_EQ(pr.decode_s, r.decode_s);
}

TEST(RooflineTest, OverheadVanishesWithLength) {
  const HardwareSpec hw;
  const auto full = load_ref("llama3b.json");
  const auto small = pruned_ref(full, 1689, 4505);
  auto ratio = [&](std::size_t n) {
    return roofline_estimate(hw, full, small, 128, n, 4, GenMode::overfill).total_s /
           roofline_estimate(hw, full, small, 128, n, 4, GenMode::pruned).total_s;
  };
  EXPECT_GT(ratio(0), 1.0);
  double prev = ratio(1);
  for (std::size_t n : {4, 16, 64, 256, 1024, 4096, 16384}) {
    const double r = ratio(n);
    EXPECT_LT(r, prev) << n;
    EXPECT_GT(r, 1.0);
    prev = r;
  }
  EXPECT_LT(ratio(4096), 1.10);
  EXPECT_LT(ratio(1 << 20) - 1.0, 1e-3);

  // N = 0 leaves only prefill, which for full and overfill is the same work.
  EXPECT_DOUBLE_EQ(roofline_estimate(hw, full, small, 128, 0, 4, GenMode::overfill).total_s,
                   roofline_estimate(hw, full, small, 128, 0, 4, GenMode::full).total_s);
}

TEST(RooflineTest, DecodeDependsOnlyOnDecodeModel) {
  const HardwareSpec hw;
  const auto b3 = load_ref("llama3b.json");
  auto wider = b3;
  wider.intermediate_dim *= 2;
  const auto small = pruned_ref(b3, 1689, 4505);
  const auto a = roofline_estimate(hw, b3, small, 64, 200, 1, GenMode::overfill);
  const auto b = roofline_estimate(hw, wider, small, 64, 200, 1, GenMode::overfill);
  EXPECT_DOUBLE_EQ(a.decode_s, b.decode_s);
  EXPECT_GT(b.prefill_s, a.prefill_s);
}

TEST(RooflineTest, Errors) {
  HardwareSpec hw;
  const ModelConfig c;
  EXPECT_THROW(roofline_estimate(hw, c, c, 0, 1, 1, GenMode::full), std::invalid_argument);
  EXPECT_THROW(roofline_estimate(hw, c, c, 1, 1, 0, GenMode::full), std::invalid_argument);
  hw.mem_bandwidth = 0;
  EXPECT_THROW(roofline_estimate(hw, c, c, 1, 1, 1, GenMode::full), std::invalid_argument);
}

TEST(BenchTest, DecodeLinearInLength) {
  const ModelConfig c;
  const auto full = init_model<float>(c, 3);
  const auto pruned = slice_model(full, select_channels(
                                            [&] {
                                              ImportanceScores s;
                                              s.hidden.assign(c.hidden_dim, 1.0);
                                              s.inter.assign(c.n_layers, std::vector<double>(c.intermediate_dim, 1.0));
                                              return s;
                                            }(),
                                            32, 128));
  const std::vector<GenMode> modes{GenMode::overfill, GenMode::pruned};
  BenchOptions opt;
  opt.repeats = 3;
  opt.warmups = 1;
  std::vector<double> ns, dec, pre;
  for (std::size_t n : {32, 64, 128, 256}) {
    const auto r = bench_wallclock(full, pruned, 32, n, 2, modes, opt);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].mode, GenMode::overfill);
    EXPECT_EQ(r[0].params, param_count(pruned.config));
    EXPECT_GE(r[0].prefill_sd, 0.0);
    ns.push_back(static_cast<double>(n));
    dec.push_back(r[0].decode_s);
    pre.push_back(r[0].prefill_s);
  }
  EXPECT_GT(slope_r2(ns, dec), 0.95);
  EXPECT_GT(dec.back(), dec.front());
  // Prefill does not grow with N; allow generous scheduler noise.
  const auto [lo, hi] = std::minmax_element(pre.begin(), pre.end());
  EXPECT_LT(*hi, 3 * *lo + 1e-4);
}

TEST(BenchTest, Errors) {
  const auto w = init_model<float>(ModelConfig{}, 4);
  const std::vector<GenMode> modes{GenMode::full};
  EXPECT_THROW(bench_wallclock(w, w, 1, 4, 1, modes), std::invalid_argument);
  auto other = ModelConfig{};
  other.n_kv_heads = 4;
  const auto foreign = init_model<float>(other, 5);
  EXPECT_THROW(bench_wallclock(w, foreign, 8, 4, 1, modes), DimensionError);
}

TEST(CostCsvTest, HeaderAndRow) {
  std::ostringstream os;
  write_cost_csv_header(os);
  CostReport r;
  r.mode = GenMode::overfill;
  r.prompt_len = 8;
  r.new_tokens = 4;
  write_cost_csv_row(os, r);
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(header, "mode,M,N,batch,prefill_s,decode_s,total_s,params,prefill_sd,decode_sd");
  EXPECT_EQ(row.rfind("overfill,8,4,1,", 0), 0u) << row;
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 9);
}
