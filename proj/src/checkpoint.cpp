#include "overfill/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace overfill {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "OVFL1";
constexpr std::size_t kMagicLen = 5;
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

}  // namespace

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden_dim"] = c.hidden_dim;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["n_kv_heads"] = c.n_kv_heads;
  j["head_dim"] = c.head_dim;
  j["intermediate_dim"] = c.intermediate_dim;
  j["norm_eps"] = c.norm_eps;
  j["rope_theta"] = c.rope_theta;
  j["tied_embeddings"] = c.tied_embeddings;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j, const std::string& where) {
  auto fail = [&](const std::string& key, const std::string& what) -> void {
    throw FormatError(where + "/" + key + ": " + what);
  };
  if (!j.is_object()) throw FormatError((where.empty() ? "/" : where) + ": model config must be an object");
  static const std::set<std::string> known = {"vocab_size", "hidden_dim",       "n_layers", "n_heads",
                                              "n_kv_heads", "head_dim",         "intermediate_dim",
                                              "norm_eps",   "rope_theta",       "tied_embeddings"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) fail(key, "unknown key");
  }
  auto count = [&](const char* key) -> std::size_t {
    if (!j.contains(key)) fail(key, "missing");
    const auto& v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(key, "expected a non-negative integer");
    }
    return v.get<std::size_t>();
  };
  auto real = [&](const char* key) -> double {
    if (!j.contains(key)) fail(key, "missing");
    if (!j.at(key).is_number()) fail(key, "expected a number");
    return j.at(key).get<double>();
  };
  ModelConfig c;
  c.vocab_size = count("vocab_size");
  c.hidden_dim = count("hidden_dim");
  c.n_layers = count("n_layers");
  c.n_heads = count("n_heads");
  c.n_kv_heads = count("n_kv_heads");
  c.head_dim = count("head_dim");
  c.intermediate_dim = count("intermediate_dim");
  c.norm_eps = real("norm_eps");
  c.rope_theta = real("rope_theta");
  if (!j.contains("tied_embeddings")) fail("tied_embeddings", "missing");
  if (!j.at("tied_embeddings").is_boolean()) fail("tied_embeddings", "expected a boolean");
  c.tied_embeddings = j.at("tied_embeddings").get<bool>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError((where.empty() ? "/" : where) + ": " + e.what());
  }
  return c;
}

std::string checkpoint_bytes(const Weights<float>& w) {
  check_weights(w);
  struct Entry {
    std::string name;
    const Tensor<float>* tensor;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  w.for_each_param([&](const std::string& name, const Tensor<float>& t) { entries.push_back({name, &t, 0}); });

  // Offsets are absolute, so the header length has to be settled first. Each
  // pass can only grow the digits of the offsets; iterate to a fixed point.
  std::string header;
  std::size_t data_start = 0;
  for (int pass = 0; pass < 8; ++pass) {
    std::size_t offset = data_start;
    for (auto& e : entries) {
      e.offset = offset;
      offset = align_up(offset + e.tensor->size() * sizeof(float));
    }
    nlohmann::ordered_json h;
    for (const auto& e : entries) {
      h[e.name] = {{"dtype", "f32"}, {"shape", e.tensor->shape()}, {"byte_offset", e.offset}};
    }
    h["__metadata__"] = {{"config", config_to_json(w.config)}, {"frozen", w.frozen}};
    header = h.dump();
    const std::size_t needed = align_up(kMagicLen + 8 + header.size());
    if (needed == data_start) break;
    data_start = needed;
  }
  // Pad the header with spaces so the first blob lands on data_start.
  header.resize(data_start - kMagicLen - 8, ' ');

  std::string out;
  out.reserve(entries.empty() ? data_start : entries.back().offset + entries.back().tensor->size() * sizeof(float));
  out.append(kMagic, kMagicLen);
  const std::uint64_t len = header.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += header;
  for (const auto& e : entries) {
    out.resize(e.offset, '\0');
    out.append(reinterpret_cast<const char*>(e.tensor->data()), e.tensor->size() * sizeof(float));
  }
  return out;
}

Weights<float> checkpoint_from_bytes(const std::string& bytes, const std::string& source) {
  auto fail = [&](const std::string& what) -> void { throw FormatError(source + ": " + what); };
  if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kMagic) != 0) fail("not an OVFL1 checkpoint");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + kMagicLen, sizeof(len));
  if (len > bytes.size() - kMagicLen - 8) fail("header length exceeds file size");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(kMagicLen + 8, len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }
  if (!h.contains("__metadata__")) fail("header lacks __metadata__");
  const auto& meta = h.at("__metadata__");
  Weights<float> w;
  w.config = config_from_json(meta.at("config"), source + ": /__metadata__/config");
  w.frozen = meta.value("frozen", false);

  // Allocate the expected layout, then fill each tensor from its blob.
  std::size_t seen = 0;
  {
    w.token_embedding = Tensor<float>({w.config.vocab_size, w.config.hidden_dim});
    w.layers.assign(w.config.n_layers, {});
    const std::size_t d = w.config.hidden_dim, i = w.config.intermediate_dim;
    for (auto& l : w.layers) {
      l.attn_norm = Tensor<float>({d});
      l.wq = Tensor<float>({d, w.config.attn_dim()});
      l.wk = Tensor<float>({d, w.config.kv_dim()});
      l.wv = Tensor<float>({d, w.config.kv_dim()});
      l.wo = Tensor<float>({w.config.attn_dim(), d});
      l.ffn_norm = Tensor<float>({d});
      l.w_gate = Tensor<float>({d, i});
      l.w_up = Tensor<float>({d, i});
      l.w_down = Tensor<float>({i, d});
    }
    w.final_norm = Tensor<float>({d});
    if (!w.config.tied_embeddings) w.lm_head = Tensor<float>({d, w.config.vocab_size});
  }
  w.for_each_param([&](const std::string& name, Tensor<float>& t) {
    if (!h.contains(name)) fail("missing tensor " + name);
    const auto& e = h.at(name);
    if (e.value("dtype", "") != "f32") fail(name + ": unsupported dtype");
    const auto shape = e.at("shape").get<Shape>();
    if (shape != t.shape()) fail(name + ": shape " + to_string(shape) + " but config implies " + to_string(t.shape()));
    const auto offset = e.at("byte_offset").get<std::size_t>();
    const std::size_t nbytes = t.size() * sizeof(float);
    if (offset % kAlign != 0) fail(name + ": misaligned byte_offset");
    if (offset < kMagicLen + 8 + len || offset + nbytes > bytes.size()) fail(name + ": blob out of bounds");
    std::memcpy(t.data(), bytes.data() + offset, nbytes);
    ++seen;
  });
  if (seen + 1 != h.size()) fail("header lists tensors the config does not define");
  check_weights(w);
  return w;
}

void write_file(const std::filesystem::path& path, const std::string& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Weights<float>& w) {
  write_file(path, checkpoint_bytes(w));
}

Weights<float> load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_bytes(read_file(path), path.string());
}

}  // namespace overfill
