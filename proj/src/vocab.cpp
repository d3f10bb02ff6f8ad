#include "nxgpt/vocab.hpp"

#include "nxgpt/error.hpp"

namespace nxgpt {

namespace {

int char_to_id(char c) {
  if (c == '\n') return kFirstCharId;
  if (c >= ' ' && c <= '~') return kFirstCharId + 1 + (c - ' ');
  return -1;
}

char id_to_char(int id) {
  if (id == kFirstCharId) return '\n';
  return static_cast<char>(' ' + (id - kFirstCharId - 1));
}

}  // namespace

TokenSequence tokenize(std::string_view text) {
  TokenSequence ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int id = char_to_id(text[i]);
    if (id < 0) {
      throw Error(ErrorKind::kTokenization,
                  "unsupported character code " + std::to_string(static_cast<unsigned char>(text[i])) +
                      " at offset " + std::to_string(i));
    }
    ids.push_back(id);
  }
  return ids;
}

std::string_view signal_prefix(Modality m) {
  switch (m) {
    case Modality::kImage: return "IMG";
    case Modality::kAudio: return "AUD";
    case Modality::kVideo: return "VID";
    case Modality::kText: break;
  }
  return "TXT";
}

SignalVocabulary::SignalVocabulary(const ModelConfig& cfg) : SignalVocabulary(cfg.signal_counts) {}

SignalVocabulary::SignalVocabulary(const std::map<Modality, int>& counts) {
  int next = kTextVocabSize;
  for (Modality m : kGeneratedModalities) {
    auto it = counts.find(m);
    const int n = it == counts.end() ? 0 : it->second;
    if (n < 0) throw Error(ErrorKind::kInvalidConfig, "negative signal count");
    first_[m] = next;
    count_[m] = n;
    next += n;
  }
  vocab_size_ = next;
}

int SignalVocabulary::first_id(Modality m) const {
  auto it = first_.find(m);
  if (it == first_.end()) throw Error(ErrorKind::kWrongModality, "no signal tokens for " + std::string(to_string(m)));
  return it->second;
}

int SignalVocabulary::count(Modality m) const {
  auto it = count_.find(m);
  return it == count_.end() ? 0 : it->second;
}

std::optional<SignalToken> SignalVocabulary::decode(int id) const {
  if (!is_signal(id)) return std::nullopt;
  for (Modality m : kGeneratedModalities) {
    const int first = first_.at(m);
    if (id >= first && id < first + count_.at(m)) return SignalToken{m, id - first};
  }
  return std::nullopt;
}

int SignalVocabulary::id(Modality m, int index) const {
  if (index < 0 || index >= count(m)) throw Error(ErrorKind::kOutOfRange, "signal index out of range");
  return first_id(m) + index;
}

TokenSequence SignalVocabulary::run(Modality m) const {
  TokenSequence r;
  for (int i = 0; i < count(m); ++i) r.push_back(first_id(m) + i);
  return r;
}

std::string SignalVocabulary::spelling(int id) const {
  auto t = decode(id);
  if (!t) throw Error(ErrorKind::kOutOfRange, "not a signal id: " + std::to_string(id));
  return "[" + std::string(signal_prefix(t->modality)) + "_" + std::to_string(t->index) + "]";
}

std::vector<SignalRun> scan_signal_runs(std::span<const int> ids, const SignalVocabulary& vocab) {
  std::vector<SignalRun> runs;
  std::size_t i = 0;
  while (i < ids.size()) {
    auto tok = vocab.decode(ids[i]);
    if (!tok) {
      ++i;
      continue;
    }
    SignalRun run{tok->modality, i, 1, false};
    bool ordered = tok->index == 0;
    int expect = tok->index + 1;
    std::size_t j = i + 1;
    for (; j < ids.size(); ++j) {
      auto next = vocab.decode(ids[j]);
      if (!next || next->modality != run.modality || next->index == 0) break;
      ordered = ordered && next->index == expect;
      ++expect;
    }
    run.length = j - i;
    run.complete = ordered && static_cast<int>(run.length) == vocab.count(run.modality);
    runs.push_back(run);
    i = j;
  }
  return runs;
}

std::string detokenize(std::span<const int> ids, const SignalVocabulary* vocab) {
  std::string out;
  for (int id : ids) {
    if (id >= kFirstCharId && id < kTextVocabSize) {
      out.push_back(id_to_char(id));
    } else if (id >= kTextVocabSize && vocab && vocab->is_signal(id)) {
      out += vocab->spelling(id);
    }
  }
  return out;
}

}  // namespace nxgpt
