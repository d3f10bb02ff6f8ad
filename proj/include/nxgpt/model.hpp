#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nxgpt/config.hpp"
#include "nxgpt/diffusion.hpp"
#include "nxgpt/encoders.hpp"
#include "nxgpt/grouping.hpp"
#include "nxgpt/llm.hpp"
#include "nxgpt/outproj.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {

// Pipeline steps recorded in checkpoint provenance.
inline constexpr const char* kStepLlmPretrain = "llm-pretrain";
inline constexpr const char* kStepDiffusionPretrain = "diffusion-pretrain";
inline constexpr const char* kStepStage1 = "stage1";
inline constexpr const char* kStepStage2 = "stage2";
inline constexpr const char* kStepStage3 = "stage3";

// Every tensor of the system in one store plus views over it. Components
// keep a pointer to the store, so a Model is pinned in memory.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  const ToyEncoders& encoders() const { return encoders_; }
  const GroupingProjector& grouping() const { return grouping_; }
  const TinyLlm& llm() const { return llm_; }
  const OutputProjection& outproj() const { return outproj_; }
  const ToyDiffusion& diffusion() const { return diffusion_; }
  const CaptionConditioner& conditioner() const { return conditioner_; }

  const std::vector<std::string>& provenance() const { return provenance_; }
  bool has(const std::string& step) const;
  void mark(const std::string& step);

  void save(const std::filesystem::path& dir) const;
  // Restores config, tensors and provenance.
  static std::unique_ptr<Model> load(const std::filesystem::path& dir);
  // Copies tensors accepted by pred (same name and shape) from a checkpoint
  // and adopts the listed provenance steps.
  void import_from(const std::filesystem::path& dir, const std::function<bool(const std::string&)>& pred,
                   const std::vector<std::string>& steps);

 private:
  void sync_flags();

  ModelConfig cfg_;
  ParamStore store_;
  ToyEncoders encoders_;
  GroupingProjector grouping_;
  TinyLlm llm_;
  OutputProjection outproj_;
  ToyDiffusion diffusion_;
  CaptionConditioner conditioner_;
  std::vector<std::string> provenance_;
};

}  // namespace nxgpt
