#pragma once

// OVFL1 checkpoint files:
//   "OVFL1" | u64 LE header length | JSON header | tensor blobs
// The header maps each tensor name to {dtype, shape, byte_offset}, where
// byte_offset is absolute within the file and 64-byte aligned, plus a
// "__metadata__" entry holding the model config and the frozen flag. Blobs are
// little-endian f32.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "overfill/model.hpp"

namespace overfill {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::ordered_json config_to_json(const ModelConfig& config);

/// Strict: every field is required and unknown keys are rejected. Errors name
/// the JSON pointer of the offending entry, prefixed by `where`.
ModelConfig config_from_json(const nlohmann::json& j, const std::string& where = "");

std::string checkpoint_bytes(const Weights<float>& w);
Weights<float> checkpoint_from_bytes(const std::string& bytes, const std::string& source = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const Weights<float>& w);
Weights<float> load_checkpoint(const std::filesystem::path& path);

/// Writes `data` to `path` in binary mode, throwing on failure.
void write_file(const std::filesystem::path& path, const std::string& data);
std::string read_file(const std::filesystem::path& path);

}  // namespace overfill
