// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "json.hpp"
#include "ulab/nn.hpp"

// Checkpoint directory layout:
//   params.bin     concatenated little-endian float32 blobs, one per parameter
//   manifest.json  {"format", "params": [{name, shape, offset, bytes, sha256}], "meta"}
// Loading verifies every blob hash against the manifest.
namespace ulab {

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

// Little-endian float32 bytes of one tensor, as stored on disk.
std::string f32_blob(const Tensor& t);
// Rounds every value to float32 so memory matches the persisted form.
void quantize_f32(const ParamSet& params);
// name -> sha256 of the parameter's float32 blob.
std::map<std::string, std::string> blob_hashes(const ParamSet& params);

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const nlohmann::json& meta);
// Fills `params` (by name, shapes must match) and returns the meta record.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamSet& params);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace ulab
