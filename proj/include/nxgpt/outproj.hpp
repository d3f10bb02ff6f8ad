#pragma once

#include <string_view>

#include "nxgpt/autograd.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {

class Rng;

struct ConditionEmbedding {
  enum class Source { kProjectedSignal, kCaptionEncoded };
  Var values;  // Q x d_c
  Source source = Source::kProjectedSignal;
};

// Per-modality encoder-decoder transformer mapping the k signal-token hidden
// states to a Q-row sequence in the decoder's conditioner space. The k
// states are encoded; Q learned queries decode with cross-attention.
// Each modality also owns the embedding and head rows of its signal tokens.
class OutputProjection {
 public:
  static void register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  OutputProjection(const ParamStore& store, const ModelConfig& cfg) : store_(&store), cfg_(cfg) {}

  // Dropout is active only in train mode (and then needs rng).
  ConditionEmbedding project_signal(const Var& states, Modality modality, Mode mode, Rng* rng = nullptr) const;

 private:
  const ParamStore* store_;
  ModelConfig cfg_;
};

// Mean over the Q positions of the squared L2 distance between rows.
Var caption_align_loss(const Var& projected, const Var& target);

// Mean over rows of the cosine similarity between matching rows.
double mean_row_cosine(const Mat& a, const Mat& b);

// Frozen text encoder standing in for each decoder's own caption encoder:
// the caption is cut into Q contiguous character chunks, each chunk's mean
// character embedding plus a slot embedding goes through tanh(x W).
class CaptionConditioner {
 public:
  static void register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  CaptionConditioner(const ParamStore& store, const ModelConfig& cfg) : store_(&store), cfg_(cfg) {}

  ConditionEmbedding encode(std::string_view caption, Modality modality) const;

 private:
  const ParamStore* store_;
  ModelConfig cfg_;
};

}  // namespace nxgpt
