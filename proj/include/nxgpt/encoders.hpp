#pragma once

#include <cstdint>
#include <vector>

#include "nxgpt/autograd.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {

class Rng;

// One modality input. Layouts (row-major, float32):
//   image: H x W x C in [0, 1]
//   audio: L samples
//   video: F x H x W x C
struct RawSample {
  Modality modality = Modality::kImage;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

struct ModalityFeatureBlock {
  Modality modality = Modality::kImage;
  Mat features;  // N x d

  Eigen::Index tokens() const { return features.rows(); }
};

// Frozen random linear patch embedders standing in for a pretrained
// multimodal encoder: features = patches * W + pos, with W and pos drawn
// once from the model seed and never trained.
class ToyEncoders {
 public:
  static void register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  ToyEncoders(const ParamStore& store, const ModelConfig& cfg) : store_(&store), cfg_(cfg) {}

  ModalityFeatureBlock encode(const RawSample& sample) const;

  int token_count(Modality m) const;
  int patch_dim(Modality m) const;
  std::vector<std::uint32_t> expected_shape(Modality m) const;

  // Rows are patches in raster order (frame-major for video).
  Mat patches(const RawSample& sample) const;

 private:
  const ParamStore* store_;
  ModelConfig cfg_;
};

}  // namespace nxgpt
