#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include <cmath>
#include <map>

#include "nxgpt/data.hpp"
#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/training.hpp"

using namespace nxgpt;

namespace {

// Small model: the mechanics do not depend on width.
ModelConfig small_config() {
  ModelConfig cfg;
  cfg.llm.layers = 2;
  cfg.llm.dim = 64;
  cfg.llm.max_seq = 512;
  return cfg;
}

void mark_all(Model& m, int through_stage) {
  m.mark(kStepLlmPretrain);
  m.mark(kStepDiffusionPretrain);
  if (through_stage >= 1) m.mark(kStepStage1);
  if (through_stage >= 2) m.mark(kStepStage2);
}

std::map<std::string, Mat> snapshot(const Model& m) {
  std::map<std::string, Mat> out;
  for (const auto& p : m.store().params()) out[p.name] = p.value();
  return out;
}

std::vector<const CaptionPair*> ptrs(const std::vector<CaptionPair>& v) {
  std::vector<const CaptionPair*> out;
  for (const auto& p : v) out.push_back(&p);
  return out;
}

}  // namespace

TEST_CASE("published recipes") {
  const double lrs[] = {0.0004, 0.0004, 0.0005};
  const int batches[] = {18, 8, 4};
  for (int s = 1; s <= 3; ++s) {
    const auto r = StageRecipe::paper(s);
    CHECK(r.stage == s);
    CHECK(r.optimizer == "Adam");
    CHECK(r.lr == lrs[s - 1]);
    CHECK(r.weight_decay == 0.001);
    CHECK(r.epochs == 1);
    CHECK(r.warmup_ratio == 0.1);
    CHECK(r.scheduler == "Linear");
    CHECK(r.batch_size == batches[s - 1]);
    CHECK(r.max_tokens == 512);
    CHECK(r.unfreeze_llm == (s == 3));
    CHECK(r.weights.nll == 1.0);
    CHECK(r.weights.align == 1.0);
    CHECK(r.weights.denoise == 1.0);
  }
  CHECK(StageRecipe::paper(1).total_steps(36) == 2);
  CHECK(StageRecipe::paper(1).total_steps(37) == 3);
  CHECK_ERROR_KIND(StageRecipe::paper(1).total_steps(0), ErrorKind::kEmptyBatch);
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_at(0, 100, 0.1, 1e-3) == 0.0);
  CHECK(lr_at(5, 100, 0.1, 1e-3) == doctest::Approx(5e-4));
  CHECK(lr_at(10, 100, 0.1, 1e-3) == doctest::Approx(1e-3));
  CHECK(lr_at(55, 100, 0.1, 1e-3) == doctest::Approx(5e-4));
  CHECK(lr_at(100, 100, 0.1, 1e-3) == 0.0);
}

TEST_CASE("adam update by hand") {
  ParamStore store;
  Mat init(1, 2);
  init << 0.5, -2.0;
  store.add("w", init, Role::kTrainable);
  store.set_trainable([](const std::string&) { return true; });
  Mat c(1, 2);
  c << 3.0, -1.0;
  Adam adam(0.9, 0.999, 1e-8, 0.01);
  double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {init(0, 0), init(0, 1)};
  for (int t = 1; t <= 3; ++t) {
    store.zero_grad();
    ag::sum(ag::mul(store.get("w"), ag::constant(c))).backward();
    adam.step(store, 0.1);
    for (int j = 0; j < 2; ++j) {
      const double g = c(0, j) + 0.01 * w[j];
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      const double mh = m[j] / (1 - std::pow(0.9, t));
      const double vh = v[j] / (1 - std::pow(0.999, t));
      w[j] = static_cast<float>(w[j] - 0.1 * mh / (std::sqrt(vh) + 1e-8));
      CHECK(store.value("w")(0, j) == w[j]);
    }
  }
  CHECK(adam.steps_taken() == 3);
}

TEST_CASE("prerequisites") {
  Model model(small_config());
  CHECK_ERROR_KIND(check_prerequisites(model, 1), ErrorKind::kDependency);
  model.mark(kStepLlmPretrain);
  CHECK_NOTHROW(check_prerequisites(model, 1));
  CHECK_ERROR_KIND(check_prerequisites(model, 2), ErrorKind::kDependency);
  model.mark(kStepStage1);
  CHECK_ERROR_KIND(check_prerequisites(model, 2), ErrorKind::kDependency);  // no diffusion yet
  model.mark(kStepDiffusionPretrain);
  CHECK_NOTHROW(check_prerequisites(model, 2));
  CHECK_ERROR_KIND(check_prerequisites(model, 3), ErrorKind::kDependency);
  try {
    check_prerequisites(model, 3);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stage2") != std::string::npos);
  }
}

TEST_CASE("stage losses decompose into weighted components") {
  Model model(small_config());
  const Dataset ds = generate_dataset(5, 2, 3);
  StageRecipe r = StageRecipe::desk(2);
  r.weights = {0.7, 1.3, 0.4};
  r.denoise_draws = 2;
  Rng rng(1);
  const auto pairs = ptrs(ds.pairs);
  const StepLoss s2 = stage2_loss(model, pairs, r, Mode::kTrain, rng);
  const auto& p = s2.parts;
  CHECK(p.ce_text == 0.0);
  CHECK(std::abs(s2.total.item() - (0.7 * p.nll_signal + 1.3 * p.align_l2 + 0.4 * p.denoise)) < 1e-6);
  CHECK(p.total == s2.total.item());
  CHECK(p.nll_signal >= 0);
  CHECK(p.align_l2 >= 0);
  CHECK(p.denoise >= 0);

  std::vector<const Dialogue*> dialogues;
  for (const auto& d : ds.mosit) dialogues.push_back(&d);
  StageRecipe r3 = StageRecipe::desk(3);
  r3.weights = {2.0, 0.5, 0.25};
  const StepLoss s3 = stage3_loss(model, dialogues, r3, Mode::kTrain, rng);
  const auto& q = s3.parts;
  CHECK(std::abs(s3.total.item() - (q.ce_text + 2.0 * q.nll_signal + 0.5 * q.align_l2 + 0.25 * q.denoise)) < 1e-6);

  std::vector<const CaptionPair*> one = {&ds.pairs[0]};
  const StepLoss s1 = stage1_loss(model, one, Mode::kEval, rng);
  CHECK(s1.total.item() == s1.parts.ce_text);
  CHECK(s1.parts.nll_signal == 0.0);
}

TEST_CASE("text-only dialogue has no generation loss") {
  Model model(small_config());
  Dialogue d;
  d.id = "chat";
  for (int t = 0; t < 3; ++t) {
    d.messages.push_back({Speaker::kHuman, "hi there", {}});
    d.messages.push_back({Speaker::kMachine, "hello!", {}});
  }
  std::vector<const Dialogue*> batch = {&d};
  Rng rng(2);
  const auto s = stage3_loss(model, batch, StageRecipe::desk(3), Mode::kTrain, rng);
  CHECK(s.parts.align_l2 == 0.0);
  CHECK(s.parts.denoise == 0.0);
  CHECK(s.parts.nll_signal == 0.0);
  CHECK(s.parts.ce_text > 0.0);
}

TEST_CASE("empty batches are rejected") {
  Model model(small_config());
  mark_all(model, 2);
  Rng rng(3);
  CHECK_ERROR_KIND(train_stage1(model, std::span<const CaptionPair>{}, StageRecipe::desk(1), rng),
                   ErrorKind::kEmptyBatch);
  CHECK_ERROR_KIND(train_stage3(model, std::span<const Dialogue>{}, StageRecipe::desk(3), rng),
                   ErrorKind::kEmptyBatch);
}

TEST_CASE("only masked parameters move and frozen grads stay empty") {
  const Dataset ds = generate_dataset(6, 2, 2);
  for (int stage = 1; stage <= 3; ++stage) {
    CAPTURE(stage);
    Model model(small_config());
    mark_all(model, stage - 1);
    const auto before = snapshot(model);
    StageRecipe r = StageRecipe::desk(stage);
    r.steps = 3;
    r.batch_size = 2;
    r.denoise_draws = 1;
    Rng rng(4);
    if (stage == 1) train_stage1(model, ds.pairs, r, rng);
    if (stage == 2) train_stage2(model, ds.pairs, r, rng);
    if (stage == 3) train_stage3(model, ds.mosit, r, rng);

    const auto mask = trainable_mask(stage, model.store());
    const std::set<std::string> trainable(mask.begin(), mask.end());
    int moved = 0;
    for (const auto& p : model.store().params()) {
      if (trainable.count(p.name)) {
        moved += !testing::bitwise_equal(p.value(), before.at(p.name));
      } else {
        CHECK_MESSAGE(testing::bitwise_equal(p.value(), before.at(p.name)), p.name);
        CHECK_MESSAGE(p.grad().size() == 0, p.name);
      }
    }
    CHECK(moved > 0);
  }
}

TEST_CASE("training is deterministic under a seed") {
  const Dataset ds = generate_dataset(8, 2, 2);
  auto run = [&] {
    auto model = std::make_unique<Model>(small_config());
    mark_all(*model, 0);
    StageRecipe r = StageRecipe::desk(1);
    r.steps = 3;
    r.batch_size = 3;
    Rng rng(9);
    std::vector<double> losses;
    train_stage1(*model, ds.pairs, r, rng, [&](const StepRecord& s) { losses.push_back(s.loss.total); });
    return std::make_pair(std::move(model), losses);
  };
  auto [a, la] = run();
  auto [b, lb] = run();
  CHECK(la == lb);
  CHECK(la.size() == 3);
  for (const auto& p : a->store().params()) CHECK(testing::bitwise_equal(p.value(), b->store().value(p.name)));
}

TEST_CASE("metrics records") {
  StepRecord s{.stage = 2, .step = 7, .lr = 1e-3, .loss = {.total = 1.5, .nll_signal = 1.5}};
  const auto j = s.to_json();
  CHECK(j["stage"] == 2);
  CHECK(j["step"] == 7);
  CHECK(j["lr"] == 1e-3);
  CHECK(j["components"]["nll_signal"] == 1.5);
  CHECK(j["total"] == 1.5);
}

TEST_CASE("gradient check harness") {
  const auto g = grad_check("grouping", 3, 40);
  CHECK(g.coordinates == 40);
  CHECK(g.max_rel_error < 1e-4);
  const auto bad = grad_check("grouping", 3, 20, 1e-5, true);
  CHECK(bad.max_rel_error > 1e-2);
  CHECK_ERROR_KIND(grad_check("nothing", 1, 5), ErrorKind::kInvalidParameter);
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(0.0, 1e-9) < 1e-2);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
}
