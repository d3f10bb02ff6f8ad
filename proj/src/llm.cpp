#include "nxgpt/llm.hpp"

#include <cmath>

#include "nxgpt/error.hpp"
#include "nxgpt/nn.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

MixedInput& MixedInput::add_tokens(const TokenSequence& ids) {
  if (!segments.empty() && !segments.back().concept_modality) {
    auto& last = segments.back().ids;
    last.insert(last.end(), ids.begin(), ids.end());
  } else {
    segments.push_back(Segment{ids, std::nullopt, Var()});
  }
  return *this;
}

MixedInput& MixedInput::add_concepts(Modality m, const Var& rows) {
  segments.push_back(Segment{{}, m, rows});
  return *this;
}

Eigen::Index MixedInput::length() const {
  Eigen::Index n = 0;
  for (const auto& s : segments) n += s.concept_modality ? s.concepts.rows() : static_cast<Eigen::Index>(s.ids.size());
  return n;
}

std::vector<int> MixedInput::position_ids() const {
  std::vector<int> out;
  for (const auto& s : segments) {
    if (s.concept_modality) {
      out.insert(out.end(), static_cast<std::size_t>(s.concepts.rows()), -1);
    } else {
      out.insert(out.end(), s.ids.begin(), s.ids.end());
    }
  }
  return out;
}

namespace {

std::string layer_prefix(int i) { return "llm.base.layer" + std::to_string(i); }
std::string lora_prefix(int i) { return "llm.lora.layer" + std::to_string(i); }
std::string signal_prefix_name(Modality m) { return "outproj." + std::string(to_string(m)); }

}  // namespace

void TinyLlm::register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.llm.dim;
  store.add_normal("llm.base.tok_embed", kTextVocabSize, d, 0.05, Role::kFrozen, rng);
  store.add_normal("llm.base.pos_embed", cfg.llm.max_seq, d, 0.05, Role::kFrozen, rng);
  for (int i = 0; i < cfg.llm.layers; ++i) {
    nn::add_block(store, layer_prefix(i), d, cfg.llm.ffn_mult * d, Role::kFrozen, rng);
  }
  nn::add_layer_norm(store, "llm.base.ln_f", d, Role::kFrozen);
  store.add_normal("llm.base.head", kTextVocabSize, d, 0.02, Role::kFrozen, rng);
  for (int i = 0; i < cfg.llm.layers; ++i) {
    nn::LoraSpec spec{lora_prefix(i), cfg.lora.targets, 0.0, true};
    nn::add_lora(store, spec, d, cfg.lora.rank, Role::kTrainable, rng);
  }
}

TinyLlm::TinyLlm(const ParamStore& store, const ModelConfig& cfg) : store_(&store), cfg_(cfg), vocab_(cfg) {}

Var TinyLlm::embed(const MixedInput& input) const {
  std::vector<Var> pieces;
  Var table = store_->get("llm.base.tok_embed");
  for (const auto& seg : input.segments) {
    if (seg.concept_modality) {
      if (seg.concepts.cols() != cfg_.llm.dim) {
        throw Error(ErrorKind::kShapeMismatch, "concept block width must equal the LLM width");
      }
      pieces.push_back(seg.concepts);
      continue;
    }
    // Split into stretches that read from the same table.
    std::size_t i = 0;
    while (i < seg.ids.size()) {
      const int id = seg.ids[i];
      if (id < 0 || id >= vocab_.vocab_size()) throw Error(ErrorKind::kOutOfRange, "token id " + std::to_string(id));
      if (!vocab_.is_signal(id)) {
        std::vector<int> run;
        while (i < seg.ids.size() && !vocab_.is_signal(seg.ids[i])) {
          if (seg.ids[i] < 0) throw Error(ErrorKind::kOutOfRange, "negative token id");
          run.push_back(seg.ids[i++]);
        }
        pieces.push_back(ag::gather_rows(table, run));
      } else {
        const Modality m = vocab_.decode(id)->modality;
        std::vector<int> run;
        while (i < seg.ids.size() && vocab_.is_signal(seg.ids[i]) && vocab_.decode(seg.ids[i])->modality == m) {
          run.push_back(vocab_.decode(seg.ids[i++])->index);
        }
        pieces.push_back(ag::gather_rows(store_->get(signal_prefix_name(m) + ".signal_embed"), run));
      }
    }
  }
  if (pieces.empty()) throw Error(ErrorKind::kInvalidInput, "empty LLM input");
  return pieces.size() == 1 ? pieces[0] : ag::concat_rows(pieces);
}

LlmOutput TinyLlm::forward(const MixedInput& input, bool lora) const {
  const Eigen::Index n = input.length();
  if (n == 0) throw Error(ErrorKind::kInvalidInput, "empty LLM input");
  if (n > cfg_.llm.max_seq) {
    throw Error(ErrorKind::kSequenceTooLong,
                std::to_string(n) + " positions exceed the maximum of " + std::to_string(cfg_.llm.max_seq));
  }
  Var x = ag::add(embed(input), ag::slice_rows(store_->get("llm.base.pos_embed"), 0, n));
  const double lora_scale = cfg_.lora.alpha / cfg_.lora.rank;
  for (int i = 0; i < cfg_.llm.layers; ++i) {
    nn::LoraSpec spec{lora_prefix(i), cfg_.lora.targets, lora_scale, lora};
    x = nn::block(*store_, layer_prefix(i), x, nn::BlockOptions{.heads = cfg_.llm.heads, .causal = true, .lora = &spec});
  }
  LlmOutput out;
  out.hidden = nn::layer_norm(*store_, "llm.base.ln_f", x);
  out.logits = logits_from_hidden(out.hidden);
  if (!out.logits.value().allFinite()) throw Error(ErrorKind::kNumeric, "non-finite LLM logits");
  return out;
}

Var TinyLlm::logits_from_hidden(const Var& hidden) const {
  std::vector<Var> parts = {ag::matmul_nt(hidden, store_->get("llm.base.head"))};
  for (Modality m : kGeneratedModalities) {
    parts.push_back(ag::matmul_nt(hidden, store_->get(signal_prefix_name(m) + ".signal_head")));
  }
  return ag::concat_cols(parts);
}

Var TinyLlm::cached_step(const MixedInput& chunk, Eigen::Index offset, std::vector<nn::KvCache>& cache,
                         bool lora) const {
  const Eigen::Index n = chunk.length();
  if (offset + n > cfg_.llm.max_seq) {
    throw Error(ErrorKind::kSequenceTooLong,
                std::to_string(offset + n) + " positions exceed the maximum of " + std::to_string(cfg_.llm.max_seq));
  }
  Var x = ag::add(embed(chunk), ag::slice_rows(store_->get("llm.base.pos_embed"), offset, n));
  const double lora_scale = cfg_.lora.alpha / cfg_.lora.rank;
  for (int i = 0; i < cfg_.llm.layers; ++i) {
    nn::LoraSpec spec{lora_prefix(i), cfg_.lora.targets, lora_scale, lora};
    x = nn::cached_block(*store_, layer_prefix(i), x, cache[static_cast<std::size_t>(i)],
                         nn::BlockOptions{.heads = cfg_.llm.heads, .causal = true, .lora = &spec});
  }
  return nn::layer_norm(*store_, "llm.base.ln_f", x);
}

Generation TinyLlm::generate(const MixedInput& prompt, const GenerateOptions& opt) const {
  if (opt.max_new < 1) throw Error(ErrorKind::kInvalidParameter, "max_new must be >= 1");
  if (opt.temperature < 0) throw Error(ErrorKind::kInvalidParameter, "temperature must be >= 0");
  if (opt.temperature > 0 && !opt.rng) throw Error(ErrorKind::kInvalidParameter, "sampling needs an rng");
  if (prompt.length() == 0) throw Error(ErrorKind::kInvalidInput, "empty prompt");
  ag::NoGradGuard no_grad;
  std::vector<nn::KvCache> cache(static_cast<std::size_t>(cfg_.llm.layers));
  Eigen::Index pos = prompt.length();
  Var hidden = cached_step(prompt, 0, cache, opt.lora);
  Eigen::RowVectorXd last = hidden.value().row(hidden.rows() - 1);
  Generation gen;
  std::vector<Eigen::RowVectorXd> rows;
  for (int step = 0; step < opt.max_new && pos < cfg_.llm.max_seq; ++step) {
    const Eigen::RowVectorXd logits = logits_from_hidden(ag::constant(last)).value().row(0);
    int next = 0;
    if (opt.temperature == 0.0) {
      Eigen::Index best = 0;
      logits.maxCoeff(&best);
      next = static_cast<int>(best);
    } else {
      Eigen::RowVectorXd p = ((logits.array() - logits.maxCoeff()) / opt.temperature).exp();
      p /= p.sum();
      double u = opt.rng->uniform();
      next = static_cast<int>(p.size()) - 1;
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        if ((u -= p(j)) < 0) {
          next = static_cast<int>(j);
          break;
        }
      }
    }
    gen.ids.push_back(next);
    // Feeding the token yields its own hidden state and the next logits.
    MixedInput tok;
    tok.add_tokens({next});
    last = cached_step(tok, pos++, cache, opt.lora).value().row(0);
    rows.push_back(last);
    if (next == kEosId) break;
  }
  gen.hidden.resize(static_cast<Eigen::Index>(rows.size()), cfg_.llm.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) gen.hidden.row(static_cast<Eigen::Index>(i)) = rows[i];
  return gen;
}

SignalStates extract_signal_states(const Var& hidden, std::span<const int> ids, const SignalVocabulary& vocab) {
  if (hidden.rows() != static_cast<Eigen::Index>(ids.size())) {
    throw Error(ErrorKind::kShapeMismatch, "hidden states and ids are not aligned");
  }
  SignalStates out;
  for (const SignalRun& run : scan_signal_runs(ids, vocab)) {
    const std::string tag = "[" + std::string(signal_prefix(run.modality)) + "]";
    if (!run.complete) {
      out.violations.push_back("incomplete or out-of-order " + tag + " run at position " + std::to_string(run.start));
    } else if (out.states.count(run.modality)) {
      out.violations.push_back("repeated " + tag + " run at position " + std::to_string(run.start) + " ignored");
    } else {
      out.states[run.modality] =
          ag::slice_rows(hidden, static_cast<Eigen::Index>(run.start), static_cast<Eigen::Index>(run.length));
      out.starts[run.modality] = run.start;
    }
  }
  return out;
}

std::vector<std::string> trainable_mask(int stage, const ParamStore& store) {
  auto starts = [](const std::string& s, const char* p) { return s.rfind(p, 0) == 0; };
  std::vector<std::string> out;
  for (const auto& p : store.params()) {
    bool take = false;
    switch (stage) {
      case 1: take = starts(p.name, "grouping."); break;
      case 2: take = starts(p.name, "outproj."); break;
      case 3: take = starts(p.name, "grouping.") || starts(p.name, "outproj.") || starts(p.name, "llm.lora."); break;
      default: throw Error(ErrorKind::kInvalidParameter, "unknown training stage " + std::to_string(stage));
    }
    if (take) out.push_back(p.name);
  }
  return out;
}

}  // namespace nxgpt
