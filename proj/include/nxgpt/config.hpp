#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace nxgpt {

enum class Modality { kText, kImage, kAudio, kVideo };

inline constexpr std::array<Modality, 3> kGeneratedModalities = {Modality::kImage, Modality::kAudio,
                                                                 Modality::kVideo};

std::string_view to_string(Modality m);
// Accepts "text", "image", "audio", "video".
std::optional<Modality> modality_from_string(std::string_view name);

struct EncoderConfig {
  int image_size = 16;
  int image_channels = 3;
  int image_patch = 4;
  int audio_length = 64;
  int audio_window = 8;
  int video_frames = 2;
  int video_size = 8;
  int video_patch = 4;
};

enum class InputProjectionKind { kGrouping, kLinear };

struct GroupingConfig {
  InputProjectionKind kind = InputProjectionKind::kGrouping;
  std::vector<int> stage_sizes = {8, 4};
  int heads = 4;
};

struct LlmConfig {
  int layers = 4;
  int heads = 4;
  int dim = 128;
  int ffn_mult = 4;
  int max_seq = 512;
};

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  std::vector<std::string> targets = {"q", "v"};
};

struct OutProjConfig {
  int hidden = 64;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  double dropout = 0.1;
  int queries = 8;  // conditioner sequence length Q
};

struct DiffusionConfig {
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int hidden = 64;
  int cond_dim = 32;  // conditioner width d_c
};

struct ModelConfig {
  int feature_dim = 64;
  EncoderConfig encoder;
  GroupingConfig grouping;
  LlmConfig llm;
  LoraConfig lora;
  std::map<Modality, int> signal_counts = {
      {Modality::kText, 0}, {Modality::kImage, 5}, {Modality::kAudio, 9}, {Modality::kVideo, 25}};
  OutProjConfig outproj;
  DiffusionConfig diffusion;
  std::uint64_t seed = 1234;

  int signal_count(Modality m) const;
  // The output-projection profile reported for the full-scale system.
  static OutProjConfig paper_outproj();
};

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

ValidationReport validate_config(const ModelConfig& cfg);

nlohmann::json to_json(const ModelConfig& cfg);
// Unknown keys and wrongly typed values are errors (kInvalidConfig).
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig load_config(const std::string& path);
void save_config(const ModelConfig& cfg, const std::string& path);
// Stable 64-bit FNV-1a of the canonical JSON dump.
std::uint64_t config_hash(const ModelConfig& cfg);

// --- parameter accounting -------------------------------------------------

enum class Role { kFrozen, kTrainable };

std::string_view to_string(Role r);
std::optional<Role> role_from_string(std::string_view name);

struct BudgetEntry {
  std::string name;
  double count = 0;  // parameters; double so paper-scale billions stay exact
  Role role = Role::kFrozen;
};

struct ParamBudget {
  std::vector<BudgetEntry> entries;
  double trainable_total = 0;
  double frozen_total = 0;
  double ratio = 0;
};

ParamBudget param_budget(const std::vector<BudgetEntry>& entries);

// Component sizes of the full-scale system (encoder, projections, LLM with
// LoRA, decoders).
std::vector<BudgetEntry> paper_scale_entries();

}  // namespace nxgpt
