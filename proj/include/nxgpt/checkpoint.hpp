#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nxgpt/config.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {

// Tensor blob: 8-byte magic "NXGPTBLB", u32 rank, rank x u32 dims, then the
// float32 payload. All integers and floats little-endian.
struct Blob {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t element_count() const;
};

std::vector<std::uint8_t> encode_blob(std::span<const std::uint32_t> shape, std::span<const float> data);
Blob decode_blob(std::span<const std::uint8_t> bytes, const std::string& what = "blob");
void write_blob(const std::filesystem::path& path, std::span<const std::uint32_t> shape, std::span<const float> data);
Blob read_blob(const std::filesystem::path& path);

Blob to_blob(const Mat& m);
Mat from_blob(const Blob& b);

inline constexpr int kCheckpointFormatVersion = 1;

struct TensorRecord {
  std::string name;
  std::string module;
  std::vector<std::uint32_t> shape;
  std::string dtype = "float32";
  Role role = Role::kFrozen;
  std::string blob;  // path relative to the checkpoint directory
};

struct CheckpointManifest {
  int format_version = kCheckpointFormatVersion;
  std::vector<TensorRecord> tensors;
  nlohmann::json config;
  // Completed pipeline steps, e.g. "llm-pretrain", "diffusion-pretrain", "stage1".
  std::vector<std::string> provenance;

  bool has(const std::string& step) const;
};

nlohmann::json to_json(const CheckpointManifest& m);
CheckpointManifest manifest_from_json(const nlohmann::json& j);

CheckpointManifest save_checkpoint(const std::filesystem::path& dir, const ParamStore& store,
                                   const ModelConfig& cfg, const std::vector<std::string>& provenance);
CheckpointManifest read_manifest(const std::filesystem::path& dir);
// Loads every tensor of the manifest into store. Unknown names, missing
// names and shape differences raise kShapeMismatch; bad blobs raise
// kCorruptCheckpoint.
CheckpointManifest load_checkpoint(const std::filesystem::path& dir, ParamStore& store);

}  // namespace nxgpt
