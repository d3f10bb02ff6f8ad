#pragma once

// Layout of LLM training and inference sequences.
//
//   captioning     [bos] <concepts> caption [eos]
//   signal         [bos] caption [X_0 .. X_{k-1}]
//   dialogue       [bos] H: text <concepts> \nM: reply [runs] [eos] H: ...
//
// Concept rows are projected attachments; runs are the gold signal tokens of
// machine-side attachments, in attachment order.

#include <string>
#include <vector>

#include "nxgpt/data.hpp"
#include "nxgpt/grouping.hpp"
#include "nxgpt/llm.hpp"

namespace nxgpt {

class Model;

inline constexpr const char* kHumanTag = "H: ";
inline constexpr const char* kMachineTag = "\nM: ";

// A gold signal run inside a built sequence.
struct SignalSpan {
  Modality modality = Modality::kImage;
  Eigen::Index start = 0;  // position of X_0
  Eigen::Index length = 0;
  const CaptionPair* target = nullptr;  // caption and latent to align with
};

struct BuiltSequence {
  MixedInput input;
  // targets[p] is the id expected from the logits at position p, or -1.
  std::vector<int> targets;
  std::vector<SignalSpan> spans;
  Eigen::Index length() const { return input.length(); }
};

// Builds sequences step by step, keeping ids, concept rows and supervision
// aligned.
class SequenceBuilder {
 public:
  explicit SequenceBuilder(const SignalVocabulary& vocab) : vocab_(&vocab) {}

  SequenceBuilder& tokens(const TokenSequence& ids, bool supervised);
  SequenceBuilder& text(const std::string& s, bool supervised) { return tokens(tokenize(s), supervised); }
  SequenceBuilder& concepts(Modality m, const Var& rows);
  SequenceBuilder& run(const CaptionPair& target, bool supervised);

  BuiltSequence finish() const;

 private:
  const SignalVocabulary* vocab_;
  MixedInput input_;
  std::vector<int> ids_;  // -1 for concept rows
  std::vector<bool> supervised_;
  std::vector<SignalSpan> spans_;
};

// Projects one raw attachment into LLM-width concept rows.
Var project_attachment(const Model& model, const RawSample& payload, const StageOptions& opt);

BuiltSequence captioning_sequence(const Model& model, const CaptionPair& pair, const StageOptions& opt);
BuiltSequence signal_sequence(const Model& model, const CaptionPair& pair);

// The full dialogue; every machine message (text, runs, eos) is supervised.
BuiltSequence dialogue_sequence(const Model& model, const Dialogue& d, const StageOptions& opt);
// The history before machine message `machine_index`, ending in "\nM: ".
BuiltSequence dialogue_prefix(const Model& model, const Dialogue& d, std::size_t machine_index,
                              const StageOptions& opt);
// Token-only renderings of captions and dialogues used to pretrain the base
// LLM, with pad ids in place of concept rows and signal runs.
std::vector<TokenSequence> pretraining_texts(const Model& model, const Dataset& ds);

}  // namespace nxgpt
