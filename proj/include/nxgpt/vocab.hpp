#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nxgpt/config.hpp"

namespace nxgpt {

// Character-level vocabulary: pad, bos, eos, then '\n' and the 95 printable
// ASCII characters ' '..'~' (96 symbols), then the signal tokens.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstCharId = 3;
inline constexpr int kCharCount = 96;
inline constexpr int kTextVocabSize = kFirstCharId + kCharCount;

using TokenSequence = std::vector<int>;

// Throws kTokenization on characters outside the supported set. Never
// produces special or signal ids, whatever the text spells.
TokenSequence tokenize(std::string_view text);

struct SignalToken {
  Modality modality;
  int index;  // position within the modality's run
};

// Contiguous id ranges [IMG_0..], [AUD_0..], [VID_0..] placed after the text
// vocabulary, in image, audio, video order.
class SignalVocabulary {
 public:
  SignalVocabulary() = default;
  explicit SignalVocabulary(const ModelConfig& cfg);
  explicit SignalVocabulary(const std::map<Modality, int>& counts);

  int first_id(Modality m) const;
  int count(Modality m) const;
  int vocab_size() const { return vocab_size_; }
  bool is_signal(int id) const { return id >= kTextVocabSize && id < vocab_size_; }
  std::optional<SignalToken> decode(int id) const;
  int id(Modality m, int index) const;
  // The complete gold run [X_0 .. X_{k-1}].
  TokenSequence run(Modality m) const;
  // "[IMG_3]" etc.
  std::string spelling(int id) const;

 private:
  std::map<Modality, int> first_;
  std::map<Modality, int> count_;
  int vocab_size_ = kTextVocabSize;
};

std::string_view signal_prefix(Modality m);  // "IMG", "AUD", "VID"

// A maximal stretch of same-modality signal ids. A new run starts at every
// X_0, at a modality change and after any non-signal id. The run is
// complete iff it is exactly [X_0 .. X_{k-1}].
struct SignalRun {
  Modality modality;
  std::size_t start;
  std::size_t length;
  bool complete;
};

std::vector<SignalRun> scan_signal_runs(std::span<const int> ids, const SignalVocabulary& vocab);

// Drops pad/bos/eos. Signal ids are spelled out when vocab is given and
// skipped otherwise.
std::string detokenize(std::span<const int> ids, const SignalVocabulary* vocab = nullptr);

}  // namespace nxgpt
