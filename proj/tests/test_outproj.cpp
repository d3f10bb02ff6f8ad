#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include <set>

#include "nxgpt/model.hpp"
#include "nxgpt/outproj.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/training.hpp"

using namespace nxgpt;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("projected signal shape and determinism") {
  ModelConfig cfg;
  Model model(cfg);
  for (Modality m : kGeneratedModalities) {
    const Var states = ag::constant(random_mat(cfg.signal_count(m), cfg.llm.dim, 1));
    const auto a = model.outproj().project_signal(states, m, Mode::kEval);
    CHECK(a.values.rows() == cfg.outproj.queries);
    CHECK(a.values.cols() == cfg.diffusion.cond_dim);
    CHECK(a.source == ConditionEmbedding::Source::kProjectedSignal);
    const auto b = model.outproj().project_signal(states, m, Mode::kEval);
    CHECK(testing::bitwise_equal(a.values.value(), b.values.value()));
  }
}

TEST_CASE("dropout only in train mode") {
  ModelConfig cfg;
  Model model(cfg);
  const Var states = ag::constant(random_mat(5, cfg.llm.dim, 2));
  Rng r1(1), r2(2);
  const auto a = model.outproj().project_signal(states, Modality::kImage, Mode::kTrain, &r1);
  const auto b = model.outproj().project_signal(states, Modality::kImage, Mode::kTrain, &r2);
  CHECK_FALSE(testing::bitwise_equal(a.values.value(), b.values.value()));
}

TEST_CASE("wrong signal count is rejected") {
  ModelConfig cfg;
  Model model(cfg);
  const Var four = ag::constant(random_mat(4, cfg.llm.dim, 3));
  CHECK_ERROR_KIND(model.outproj().project_signal(four, Modality::kImage, Mode::kEval),
                   ErrorKind::kSignalCountMismatch);
}

TEST_CASE("caption alignment loss") {
  const Mat t = random_mat(8, 32, 4);
  CHECK(caption_align_loss(ag::constant(t), ag::constant(t)).item() == 0.0);
  const Mat shifted = t.array() + 1.0;
  CHECK(caption_align_loss(ag::constant(shifted), ag::constant(t)).item() == doctest::Approx(32.0).epsilon(1e-12));

  const Mat p = random_mat(8, 32, 5);
  // Mean over rows of the squared row distance, by loops.
  double acc = 0;
  for (int i = 0; i < 8; ++i) {
    double row = 0;
    for (int j = 0; j < 32; ++j) row += (p(i, j) - t(i, j)) * (p(i, j) - t(i, j));
    acc += row;
  }
  const double l = caption_align_loss(ag::constant(p), ag::constant(t)).item();
  CHECK(std::abs(l - acc / 8) < 1e-6);
  CHECK(l == caption_align_loss(ag::constant(t), ag::constant(p)).item());
  CHECK(l > 0);

  CHECK_ERROR_KIND(caption_align_loss(ag::constant(p), ag::constant(Mat::Zero(7, 32))), ErrorKind::kShapeMismatch);
}

TEST_CASE("row cosine") {
  const Mat a = random_mat(4, 6, 6);
  CHECK(mean_row_cosine(a, a) == doctest::Approx(1.0));
  CHECK(mean_row_cosine(a, -a) == doctest::Approx(-1.0));
  CHECK(mean_row_cosine(a, 3.0 * a) == doctest::Approx(1.0));
}

TEST_CASE("per-modality projections are disjoint") {
  Model model(ModelConfig{});
  std::map<Modality, std::set<std::string>> names;
  for (const auto& p : model.store().params()) {
    for (Modality m : kGeneratedModalities) {
      if (p.name.rfind("outproj." + std::string(to_string(m)) + ".", 0) == 0) names[m].insert(p.name);
    }
  }
  REQUIRE(names.size() == 3);
  std::set<std::string> all;
  std::size_t total = 0;
  for (const auto& [m, s] : names) {
    CHECK_FALSE(s.empty());
    all.insert(s.begin(), s.end());
    total += s.size();
  }
  CHECK(all.size() == total);
  for (const auto& p : model.store().params()) {
    if (p.module() == "outproj") CHECK(all.count(p.name) == 1);
  }
}

TEST_CASE("caption conditioner") {
  ModelConfig cfg;
  Model model(cfg);
  const auto a = model.conditioner().encode("a red dot at left", Modality::kImage);
  CHECK(a.values.rows() == cfg.outproj.queries);
  CHECK(a.values.cols() == cfg.diffusion.cond_dim);
  CHECK(a.source == ConditionEmbedding::Source::kCaptionEncoded);
  const auto b = model.conditioner().encode("a red dot at right", Modality::kImage);
  CHECK_FALSE(testing::bitwise_equal(a.values.value(), b.values.value()));
  CHECK(testing::bitwise_equal(a.values.value(),
                               model.conditioner().encode("a red dot at left", Modality::kImage).values.value()));
  for (const auto& p : model.store().params()) {
    if (p.module() == "conditioner") CHECK(p.role == Role::kFrozen);
  }
}

TEST_CASE("alignment gradient through the projection matches finite differences") {
  const auto r = grad_check("outproj", 11, 30);
  CHECK(r.coordinates == 30);
  CHECK(r.max_rel_error < 1e-4);
}
