// SPDX-License-Identifier: Apache-2.0
#include "ulab/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ulab/errors.hpp"

namespace ulab {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace fs = std::filesystem;

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw RuntimeFailure("sha256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  const std::string data = read_text(path);
  return sha256_hex({reinterpret_cast<const unsigned char*>(data.data()), data.size()});
}

std::string f32_blob(const Tensor& t) {
  std::string out(t.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::memcpy(out.data() + i * sizeof(float), &f, sizeof(float));
  }
  return out;
}

void quantize_f32(const ParamSet& params) {
  for (const auto& [name, t] : params.entries()) {
    Tensor p = t;
    for (double& v : p.data()) v = static_cast<double>(static_cast<float>(v));
  }
}

std::map<std::string, std::string> blob_hashes(const ParamSet& params) {
  std::map<std::string, std::string> out;
  for (const auto& [name, t] : params.entries()) {
    const std::string b = f32_blob(t);
    out[name] = sha256_hex({reinterpret_cast<const unsigned char*>(b.data()), b.size()});
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw RuntimeFailure("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void save_checkpoint(const fs::path& dir, const ParamSet& params, const nlohmann::json& meta) {
  fs::create_directories(dir);
  std::string bin;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : params.entries()) {
    const std::string b = f32_blob(t);
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", bin.size()},
                       {"bytes", b.size()},
                       {"sha256", sha256_hex({reinterpret_cast<const unsigned char*>(b.data()), b.size()})}});
    bin += b;
  }
  write_text(dir / "params.bin", bin);
  nlohmann::json manifest{{"format", "ulab-checkpoint-v1"}, {"params", entries}, {"meta", meta}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

nlohmann::json read_checkpoint_meta(const fs::path& dir) {
  return nlohmann::json::parse(read_text(dir / "manifest.json")).at("meta");
}

nlohmann::json load_checkpoint(const fs::path& dir, ParamSet& params) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure("corrupt checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "ulab-checkpoint-v1")
    throw RuntimeFailure("unknown checkpoint format in " + dir.string());
  const std::string bin = read_text(dir / "params.bin");
  std::map<std::string, nlohmann::json> by_name;
  for (const auto& e : manifest.at("params")) by_name[e.at("name").get<std::string>()] = e;
  for (const auto& [name, t] : params.entries()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw RuntimeFailure("checkpoint " + dir.string() + " lacks parameter " + name);
    const auto& e = it->second;
    if (e.at("shape").get<Shape>() != t.shape())
      throw RuntimeFailure("shape mismatch for " + name + " in " + dir.string());
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t nbytes = e.at("bytes").get<std::size_t>();
    if (nbytes != t.size() * sizeof(float) || off + nbytes > bin.size())
      throw RuntimeFailure("blob bounds invalid for " + name);
    const auto* bytes = reinterpret_cast<const unsigned char*>(bin.data() + off);
    if (sha256_hex({bytes, nbytes}) != e.at("sha256").get<std::string>())
      throw RuntimeFailure("hash mismatch for parameter " + name + " in " + dir.string());
    Tensor p = t;
    auto dst = p.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      float f;
      std::memcpy(&f, bytes + i * sizeof(float), sizeof(float));
      dst[i] = static_cast<double>(f);
    }
  }
  return manifest.at("meta");
}

}  // namespace ulab
