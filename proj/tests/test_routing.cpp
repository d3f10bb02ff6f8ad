#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include <fstream>

#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/routing.hpp"
#include "protocol_util.hpp"

using namespace nxgpt;

namespace {

TokenSequence concat(TokenSequence a, const TokenSequence& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("text plus an image run") {
  const SignalVocabulary vocab{ModelConfig{}};
  const auto d = parse_stream({concat(tokenize("sure! "), vocab.run(Modality::kImage)), {}}, vocab);
  CHECK(d.text == "sure!");
  CHECK(d.active(Modality::kImage));
  CHECK_FALSE(d.active(Modality::kAudio));
  CHECK_FALSE(d.active(Modality::kVideo));
  CHECK(d.violations.empty());
}

TEST_CASE("plain text deactivates everything") {
  const SignalVocabulary vocab{ModelConfig{}};
  const auto d = parse_stream({tokenize("just chatting, [IMG_0] is only text"), {}}, vocab);
  CHECK(d.activated.empty());
  CHECK(d.violations.empty());
  CHECK(d.text == "just chatting, [IMG_0] is only text");
}

TEST_CASE("out-of-order run is a violation") {
  const SignalVocabulary vocab{ModelConfig{}};
  TokenSequence ids = {vocab.id(Modality::kImage, 0), vocab.id(Modality::kImage, 2), vocab.id(Modality::kImage, 1),
                       vocab.id(Modality::kImage, 3), vocab.id(Modality::kImage, 4)};
  const auto d = parse_stream({ids, {}}, vocab);
  CHECK_FALSE(d.active(Modality::kImage));
  CHECK(d.violations.size() == 1);
}

TEST_CASE("only the first run of a modality counts") {
  const SignalVocabulary vocab{ModelConfig{}};
  const auto run = vocab.run(Modality::kAudio);
  const auto ids = concat(concat(run, tokenize(" and ")), run);
  Mat h = Mat::Zero(static_cast<Eigen::Index>(ids.size()), 3);
  for (Eigen::Index i = 0; i < h.rows(); ++i) h(i, 0) = static_cast<double>(i);
  const auto d = parse_stream({ids, h}, vocab);
  CHECK(d.active(Modality::kAudio));
  CHECK(d.violations.size() == 1);
  REQUIRE(d.states.count(Modality::kAudio) == 1);
  CHECK(d.states.at(Modality::kAudio).rows() == 9);
  CHECK(d.states.at(Modality::kAudio)(0, 0) == 0.0);  // first run's positions
  CHECK(d.states.at(Modality::kAudio)(8, 0) == 8.0);
}

TEST_CASE("two modalities in one reply") {
  const SignalVocabulary vocab{ModelConfig{}};
  const auto ids = concat(concat(tokenize("ok "), vocab.run(Modality::kVideo)), vocab.run(Modality::kImage));
  const auto d = parse_stream({ids, {}}, vocab);
  CHECK(d.activated == std::set<Modality>{Modality::kImage, Modality::kVideo});
  CHECK(d.violations.empty());
}

TEST_CASE("misaligned hidden states are rejected") {
  const SignalVocabulary vocab{ModelConfig{}};
  CHECK_ERROR_KIND(parse_stream({tokenize("abc"), Mat::Zero(2, 4)}, vocab), ErrorKind::kShapeMismatch);
}

TEST_CASE("randomised emit and parse round trip") {
  const SignalVocabulary vocab{ModelConfig{}};
  Rng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    RoutingDecision d;
    d.text = testing::random_text(rng, 12);
    for (Modality m : kGeneratedModalities) {
      if (rng.below(2)) d.activated.insert(m);
    }
    const auto back = parse_stream({testing::emit_stream(d, vocab, rng), {}}, vocab);
    CHECK(back.activated == d.activated);
    CHECK(back.violations.empty());
  }
}

TEST_CASE("malformed fixtures deactivate and record") {
  const SignalVocabulary vocab{ModelConfig{}};
  const auto fixtures = testing::malformed_fixtures(vocab);
  CHECK(fixtures.size() >= 18);
  for (const auto& f : fixtures) {
    RoutingDecision d;
    CHECK_NOTHROW(d = parse_stream({f.ids, {}}, vocab));
    CHECK_MESSAGE(!d.active(f.modality), f.name);
    CHECK_MESSAGE(!d.violations.empty(), f.name);
  }
}

TEST_CASE("inference on a text-only reply calls no decoder") {
  ModelConfig cfg;
  Model model(cfg);
  Rng rng(1);
  InferenceRequest req;
  req.prompt = "hello";
  req.max_new = 12;
  const auto res = run_inference(model, req, rng);
  int calls = 0;
  for (const auto& [m, c] : res.decoder_calls) calls += c;
  CHECK(calls == static_cast<int>(res.decision.activated.size()));
  CHECK(res.outputs.size() == res.decision.activated.size());

  const auto j = res.to_json();
  CHECK(j.contains("text"));
  CHECK(j.contains("activations"));
  CHECK(j.contains("violations"));
  CHECK(j.contains("decoder_calls"));

  const auto dir = testing::scratch_dir("infer_record");
  save_inference(dir, res);
  CHECK(std::filesystem::exists(dir / "record.json"));

  req.samples = 0;
  CHECK_ERROR_KIND(run_inference(model, req, rng), ErrorKind::kInvalidParameter);
}
