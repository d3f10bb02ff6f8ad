#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nxgpt/diffusion.hpp"
#include "nxgpt/encoders.hpp"
#include "nxgpt/vocab.hpp"

namespace nxgpt {

class Model;
class Rng;

struct GeneratedStream {
  TokenSequence ids;
  Mat hidden;  // one row per id; may be empty when only parsing activations
};

struct RoutingDecision {
  std::string text;
  std::set<Modality> activated;
  std::map<Modality, Mat> states;  // k x d_llm per activated modality, when hidden states were given
  std::vector<std::string> violations;

  bool active(Modality m) const { return activated.count(m) != 0; }
};

// Activation follows the first complete contiguous run of each modality;
// everything else becomes a violation record, never an exception.
RoutingDecision parse_stream(const GeneratedStream& stream, const SignalVocabulary& vocab);

struct InferenceRequest {
  std::string prompt;
  std::vector<RawSample> attachments;
  int max_new = 96;
  int samples = 1;  // latents drawn per activated decoder
};

struct InferenceResult {
  GeneratedStream stream;
  RoutingDecision decision;
  std::map<Modality, std::vector<LatentSample>> outputs;
  // Decoder invocations per modality during this call.
  std::map<Modality, int> decoder_calls;

  nlohmann::json to_json() const;
};

// Encode attachments, generate greedily, parse, then project and sample
// only for activated modalities.
InferenceResult run_inference(const Model& model, const InferenceRequest& req, Rng& rng);

// Writes record.json plus one latent blob per activated modality.
void save_inference(const std::filesystem::path& dir, const InferenceResult& result);

}  // namespace nxgpt
