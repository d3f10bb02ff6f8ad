#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nxgpt/autograd.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/nn.hpp"
#include "nxgpt/params.hpp"
#include "nxgpt/vocab.hpp"

namespace nxgpt {

class Rng;

// Token ids interleaved with projected concept blocks. Concept rows bypass
// the embedding table and enter the residual stream directly.
struct MixedInput {
  struct Segment {
    TokenSequence ids;
    std::optional<Modality> concept_modality;
    Var concepts;  // rows x d_llm when concept_modality is set
  };
  std::vector<Segment> segments;

  MixedInput& add_tokens(const TokenSequence& ids);
  MixedInput& add_concepts(Modality m, const Var& rows);
  Eigen::Index length() const;
  // Token id at every position, with -1 for concept rows.
  std::vector<int> position_ids() const;
};

struct LlmOutput {
  Var logits;  // n x vocab
  Var hidden;  // n x d_llm, final-layer states after the last layer norm
};

struct GenerateOptions {
  int max_new = 64;
  // 0 selects greedy decoding.
  double temperature = 0.0;
  Rng* rng = nullptr;
  bool lora = true;
};

struct Generation {
  TokenSequence ids;  // generated ids only (eos included when emitted)
  Mat hidden;         // hidden state at each generated id's own position
};

// Decoder-only transformer: learned token and position embeddings, pre-LN
// causal blocks, final layer norm and an untied output head. Signal-token
// rows of the embedding and head are owned by the output projections
// ("outproj.<modality>.signal_embed" / ".signal_head").
class TinyLlm {
 public:
  static void register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  TinyLlm(const ParamStore& store, const ModelConfig& cfg);

  LlmOutput forward(const MixedInput& input, bool lora = true) const;
  Generation generate(const MixedInput& prompt, const GenerateOptions& opt) const;

  const SignalVocabulary& vocab() const { return vocab_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  Var embed(const MixedInput& input) const;
  Var logits_from_hidden(const Var& hidden) const;
  // Runs new positions [offset, offset + n) against the cache; no gradients.
  Var cached_step(const MixedInput& chunk, Eigen::Index offset, std::vector<nn::KvCache>& cache, bool lora) const;

  const ParamStore* store_;
  ModelConfig cfg_;
  SignalVocabulary vocab_;
};

struct SignalStates {
  std::map<Modality, Var> states;        // k x d_llm per activated modality
  std::map<Modality, std::size_t> starts;  // position of X_0
  std::vector<std::string> violations;
};

// Hidden states of the first complete signal run of every modality.
// Incomplete, out-of-order and repeated runs are reported, not extracted.
SignalStates extract_signal_states(const Var& hidden, std::span<const int> ids, const SignalVocabulary& vocab);

// Parameter names updated in a training stage:
//   1: input projection; 2: output projections; 3: LoRA + both projections.
std::vector<std::string> trainable_mask(int stage, const ParamStore& store);

}  // namespace nxgpt
