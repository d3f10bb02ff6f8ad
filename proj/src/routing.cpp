#include "nxgpt/routing.hpp"

#include <fstream>

#include "nxgpt/checkpoint.hpp"
#include "nxgpt/error.hpp"
#include "nxgpt/llm.hpp"
#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/sequence.hpp"

namespace nxgpt {

RoutingDecision parse_stream(const GeneratedStream& stream, const SignalVocabulary& vocab) {
  const bool with_states = stream.hidden.rows() > 0;
  if (with_states && stream.hidden.rows() != static_cast<Eigen::Index>(stream.ids.size())) {
    throw Error(ErrorKind::kShapeMismatch, "stream ids and hidden states are not aligned");
  }
  RoutingDecision d;
  d.text = detokenize(stream.ids);
  // Strip the padding that signal runs leave behind, e.g. "sure! " + run.
  while (!d.text.empty() && d.text.back() == ' ') d.text.pop_back();
  for (const SignalRun& run : scan_signal_runs(stream.ids, vocab)) {
    const std::string tag = "[" + std::string(signal_prefix(run.modality)) + "]";
    if (!run.complete) {
      d.violations.push_back("incomplete or out-of-order " + tag + " run at position " + std::to_string(run.start));
    } else if (d.active(run.modality)) {
      d.violations.push_back("repeated " + tag + " run at position " + std::to_string(run.start) + " ignored");
    } else {
      d.activated.insert(run.modality);
      if (with_states) {
        d.states[run.modality] = stream.hidden.middleRows(static_cast<Eigen::Index>(run.start),
                                                          static_cast<Eigen::Index>(run.length));
      }
    }
  }
  return d;
}

InferenceResult run_inference(const Model& model, const InferenceRequest& req, Rng& rng) {
  if (req.samples < 1) throw Error(ErrorKind::kInvalidParameter, "samples must be >= 1");
  const StageOptions eval{.mode = Mode::kEval};
  SequenceBuilder b(model.llm().vocab());
  b.tokens({kBosId}, false).text(std::string(kHumanTag) + req.prompt, false);
  for (const auto& a : req.attachments) b.concepts(a.modality, project_attachment(model, a, eval));
  b.text(kMachineTag, false);
  const BuiltSequence prompt = b.finish();

  InferenceResult res;
  const Generation gen = model.llm().generate(prompt.input, GenerateOptions{.max_new = req.max_new});
  res.stream.ids = gen.ids;
  res.stream.hidden = gen.hidden;
  res.decision = parse_stream(res.stream, model.llm().vocab());
  for (Modality m : kGeneratedModalities) res.decoder_calls[m] = 0;

  // Deactivated decoders are never touched.
  for (Modality m : res.decision.activated) {
    if (!model.diffusion().trained(m)) {
      throw Error(ErrorKind::kMissingDecoder, "the " + std::string(to_string(m)) +
                                                  " decoder is activated but the checkpoint has no pretrained " +
                                                  std::string(to_string(m)) + " diffusion backbone");
    }
    ag::NoGradGuard no_grad;
    const ConditionEmbedding cond =
        model.outproj().project_signal(ag::constant(res.decision.states.at(m)), m, Mode::kEval);
    res.outputs[m] = model.diffusion().sample(m, cond.values.value(), rng, req.samples);
    ++res.decoder_calls[m];
  }
  return res;
}

nlohmann::json InferenceResult::to_json() const {
  nlohmann::json act = nlohmann::json::object();
  nlohmann::json latents = nlohmann::json::object();
  for (Modality m : kGeneratedModalities) {
    act[std::string(to_string(m))] = decision.active(m) ? "activated" : "deactivated";
    if (auto it = outputs.find(m); it != outputs.end()) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& s : it->second) rows.push_back(std::vector<double>(s.values.data(), s.values.data() + s.values.size()));
      latents[std::string(to_string(m))] = {{"blob", "latents/" + std::string(to_string(m)) + ".bin"}, {"values", rows}};
    }
  }
  nlohmann::json calls = nlohmann::json::object();
  for (const auto& [m, n] : decoder_calls) calls[std::string(to_string(m))] = n;
  return {{"text", decision.text},
          {"ids", stream.ids},
          {"activations", act},
          {"violations", decision.violations},
          {"latents", latents},
          {"decoder_calls", calls}};
}

void save_inference(const std::filesystem::path& dir, const InferenceResult& result) {
  std::filesystem::create_directories(dir / "latents");
  for (const auto& [m, samples] : result.outputs) {
    Mat all(static_cast<Eigen::Index>(samples.size()), samples.front().values.cols());
    for (std::size_t i = 0; i < samples.size(); ++i) all.row(static_cast<Eigen::Index>(i)) = samples[i].values;
    const Blob b = to_blob(all);
    write_blob(dir / "latents" / (std::string(to_string(m)) + ".bin"), b.shape, b.data);
  }
  std::ofstream out(dir / "record.json");
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "record.json").string());
  out << result.to_json().dump(2) << "\n";
}

}  // namespace nxgpt
