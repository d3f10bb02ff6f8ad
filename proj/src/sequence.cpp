#include "nxgpt/sequence.hpp"

#include "nxgpt/error.hpp"
#include "nxgpt/model.hpp"

namespace nxgpt {

SequenceBuilder& SequenceBuilder::tokens(const TokenSequence& ids, bool supervised) {
  if (ids.empty()) return *this;
  input_.add_tokens(ids);
  ids_.insert(ids_.end(), ids.begin(), ids.end());
  supervised_.insert(supervised_.end(), ids.size(), supervised);
  return *this;
}

SequenceBuilder& SequenceBuilder::concepts(Modality m, const Var& rows) {
  input_.add_concepts(m, rows);
  ids_.insert(ids_.end(), static_cast<std::size_t>(rows.rows()), -1);
  supervised_.insert(supervised_.end(), static_cast<std::size_t>(rows.rows()), false);
  return *this;
}

SequenceBuilder& SequenceBuilder::run(const CaptionPair& target, bool supervised) {
  const TokenSequence ids = vocab_->run(target.modality);
  spans_.push_back(SignalSpan{target.modality, static_cast<Eigen::Index>(ids_.size()),
                              static_cast<Eigen::Index>(ids.size()), &target});
  return tokens(ids, supervised);
}

BuiltSequence SequenceBuilder::finish() const {
  BuiltSequence out;
  out.input = input_;
  out.spans = spans_;
  out.targets.assign(ids_.size(), -1);
  for (std::size_t p = 0; p + 1 < ids_.size(); ++p) {
    if (supervised_[p + 1]) out.targets[p] = ids_[p + 1];
  }
  return out;
}

Var project_attachment(const Model& model, const RawSample& payload, const StageOptions& opt) {
  const ModalityFeatureBlock block = model.encoders().encode(payload);
  return model.grouping().to_llm(model.grouping().project(block, opt));
}

BuiltSequence captioning_sequence(const Model& model, const CaptionPair& pair, const StageOptions& opt) {
  SequenceBuilder b(model.llm().vocab());
  b.tokens({kBosId}, false).concepts(pair.modality, project_attachment(model, pair.payload, opt));
  b.text(pair.caption, true).tokens({kEosId}, true);
  return b.finish();
}

BuiltSequence signal_sequence(const Model& model, const CaptionPair& pair) {
  if (pair.modality == Modality::kText) throw Error(ErrorKind::kWrongModality, "text has no signal tokens");
  SequenceBuilder b(model.llm().vocab());
  b.tokens({kBosId}, false).text(pair.caption, false).run(pair, true);
  return b.finish();
}

namespace {

void human_message(SequenceBuilder& b, const Model& model, const Message& m, const StageOptions& opt) {
  b.text(std::string(kHumanTag) + m.text, false);
  for (const auto& a : m.attachments) b.concepts(a.modality, project_attachment(model, a.payload, opt));
  b.text(kMachineTag, false);
}

void machine_message(SequenceBuilder& b, const Message& m) {
  b.text(m.text, true);
  for (const auto& a : m.attachments) b.run(a, true);
  b.tokens({kEosId}, true);
}

void check_roles(const Dialogue& d) {
  for (std::size_t i = 0; i < d.messages.size(); ++i) {
    const Speaker want = i % 2 == 0 ? Speaker::kHuman : Speaker::kMachine;
    if (d.messages[i].speaker != want) throw Error(ErrorKind::kInvalidInput, d.id + ": roles do not alternate");
  }
}

}  // namespace

BuiltSequence dialogue_sequence(const Model& model, const Dialogue& d, const StageOptions& opt) {
  check_roles(d);
  if (d.turns() == 0) throw Error(ErrorKind::kInvalidInput, d.id + ": dialogue has no machine turn");
  SequenceBuilder b(model.llm().vocab());
  b.tokens({kBosId}, false);
  for (std::size_t i = 0; i < d.messages.size(); ++i) {
    if (i % 2 == 0) {
      human_message(b, model, d.messages[i], opt);
    } else {
      machine_message(b, d.messages[i]);
    }
  }
  return b.finish();
}

BuiltSequence dialogue_prefix(const Model& model, const Dialogue& d, std::size_t machine_index,
                              const StageOptions& opt) {
  check_roles(d);
  if (machine_index >= d.messages.size() || machine_index % 2 != 1) {
    throw Error(ErrorKind::kOutOfRange, d.id + ": message " + std::to_string(machine_index) + " is not a machine reply");
  }
  SequenceBuilder b(model.llm().vocab());
  b.tokens({kBosId}, false);
  for (std::size_t i = 0; i < machine_index; ++i) {
    if (i % 2 == 0) {
      human_message(b, model, d.messages[i], opt);
    } else {
      machine_message(b, d.messages[i]);
    }
  }
  return b.finish();
}

std::vector<TokenSequence> pretraining_texts(const Model& model, const Dataset& ds) {
  // Pad ids stand in for the rows that are not text: concept blocks and
  // signal runs. The base model thus learns to read past them.
  const auto slots = [&](TokenSequence& ids, Modality m, bool output) {
    const int n = output ? model.config().signal_count(m)
                         : model.grouping().output_tokens(model.encoders().token_count(m));
    ids.insert(ids.end(), static_cast<std::size_t>(n), kPadId);
  };
  const auto append = [](TokenSequence& ids, const std::string& s) {
    const TokenSequence t = tokenize(s);
    ids.insert(ids.end(), t.begin(), t.end());
  };
  std::vector<TokenSequence> out;
  for (const auto& p : ds.pairs) {
    TokenSequence ids = {kBosId};
    slots(ids, p.modality, false);
    append(ids, p.caption);
    ids.push_back(kEosId);
    out.push_back(std::move(ids));
  }
  const auto dialogue = [&](const Dialogue& d) {
    TokenSequence ids = {kBosId};
    for (std::size_t i = 0; i < d.messages.size(); ++i) {
      const Message& msg = d.messages[i];
      if (i % 2 == 0) {
        append(ids, kHumanTag + msg.text);
        for (const auto& a : msg.attachments) slots(ids, a.modality, false);
        append(ids, kMachineTag);
      } else {
        append(ids, msg.text);
        for (const auto& a : msg.attachments) slots(ids, a.modality, true);
        ids.push_back(kEosId);
      }
    }
    out.push_back(std::move(ids));
  };
  for (const auto& d : ds.t2m) dialogue(d);
  for (const auto& d : ds.mosit) dialogue(d);
  return out;
}

}  // namespace nxgpt
