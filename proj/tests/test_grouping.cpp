#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include <cmath>

#include "nxgpt/grouping.hpp"
#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"

using namespace nxgpt;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

ModalityFeatureBlock random_block(const ModelConfig& cfg, int n, std::uint64_t seed) {
  return {Modality::kImage, random_mat(n, cfg.feature_dim, seed)};
}

bool one_hot_columns(const Mat& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    int ones = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      if (m(i, j) == 1.0) ++ones;
      else if (m(i, j) != 0.0) return false;
    }
    if (ones != 1) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("gumbel transform") {
  CHECK(gumbel_from_uniform(std::exp(-1.0)) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::isfinite(gumbel_from_uniform(0.0)));
  CHECK(std::isfinite(gumbel_from_uniform(1.0)));

  Rng rng(17);
  const Mat g = sample_gumbel(100, 1000, rng);
  CHECK(g.allFinite());
  // Mean of Gumbel(0, 1) is the Euler-Mascheroni constant.
  CHECK(std::abs(g.mean() - 0.5772156649) < 0.01);
}

TEST_CASE("orthogonal similarity gives uniform columns") {
  Mat c = Mat::Zero(4, 8);
  Mat x = Mat::Zero(6, 8);
  for (int i = 0; i < 4; ++i) c(i, 0) = 1.0 + i;
  for (int j = 0; j < 6; ++j) x(j, 1) = 2.0 - 0.1 * j;
  const Var a = soft_assignment(ag::constant(c), ag::constant(x), ag::constant(Mat::Ones(1, 1)), Mat::Zero(4, 6));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) CHECK(a.value()(i, j) == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("straight-through forward is one-hot") {
  ModelConfig cfg;
  Model model(cfg);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    StageOptions opt{.mode = Mode::kTrain, .rng = &rng};
    const auto out = model.grouping().project(random_block(cfg, 16, 100 + trial), opt);
    for (const auto& st : out.stages) {
      CHECK(one_hot_columns(st.hard_assignment.value()));
      const Mat sums = st.assignment.value().colwise().sum();
      for (Eigen::Index j = 0; j < sums.cols(); ++j) CHECK(std::abs(sums(0, j) - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("straight-through backward equals the soft gradient") {
  const Var c = ag::leaf(random_mat(4, 8, 1));
  const Var x = ag::leaf(random_mat(10, 8, 2));
  const Mat w = random_mat(4, 10, 3);
  Rng rng(4);
  const Mat g = sample_gumbel(4, 10, rng);

  const Var soft = soft_assignment(c, x, ag::constant(Mat::Constant(1, 1, 0.7)), g);
  ag::sum(ag::mul(straight_through(soft), ag::constant(w))).backward();
  const Mat gc_hard = c.grad();
  const Mat gx_hard = x.grad();
  c.node()->zero_grad();
  x.node()->zero_grad();

  const Var soft2 = soft_assignment(c, x, ag::constant(Mat::Constant(1, 1, 0.7)), g);
  ag::sum(ag::mul(soft2, ag::constant(w))).backward();
  CHECK((gc_hard - c.grad()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((gx_hard - x.grad()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grouping output shape") {
  ModelConfig cfg;
  Model model(cfg);
  const auto out = model.grouping().project(random_block(cfg, 16, 5), StageOptions{});
  CHECK(out.features.rows() == 4);
  CHECK(out.features.cols() == 64);
  CHECK(out.stages.size() == 2);
  CHECK(model.grouping().to_llm(out).cols() == cfg.llm.dim);
  CHECK(model.grouping().output_tokens(16) == 4);
}

TEST_CASE("single stage with one concept per patch follows the nearest patch") {
  ModelConfig cfg;
  cfg.grouping.stage_sizes = {16};
  Model model(cfg);
  // Orthogonal patches: a scaled permutation of basis vectors.
  Mat x = Mat::Zero(16, cfg.feature_dim);
  for (int i = 0; i < 16; ++i) x(i, (i * 7) % 16) = 3.0;
  const auto out = model.grouping().project(ag::constant(x), Modality::kImage, StageOptions{});
  const auto& st = out.stages.front();
  const Mat& ch = st.concepts_hat.value();
  const Mat& xh = st.inputs_hat.value();
  // Independent cosine similarity and argmax by loops.
  for (Eigen::Index j = 0; j < xh.rows(); ++j) {
    Eigen::Index best = 0;
    double best_v = -2.0;
    for (Eigen::Index i = 0; i < ch.rows(); ++i) {
      double dot = 0, nc = 0, nx = 0;
      for (Eigen::Index k = 0; k < ch.cols(); ++k) {
        dot += ch(i, k) * xh(j, k);
        nc += ch(i, k) * ch(i, k);
        nx += xh(j, k) * xh(j, k);
      }
      const double cos = dot / std::sqrt(nc * nx);
      if (cos > best_v) {
        best_v = cos;
        best = i;
      }
    }
    CHECK(st.hard_assignment.value()(best, j) == 1.0);
  }
}

TEST_CASE("eval mode is deterministic, train mode is noisy") {
  ModelConfig cfg;
  Model model(cfg);
  const auto block = random_block(cfg, 16, 6);
  const auto a = model.grouping().project(block, StageOptions{});
  const auto b = model.grouping().project(block, StageOptions{});
  CHECK(testing::bitwise_equal(a.features.value(), b.features.value()));
  for (const auto& st : a.stages) CHECK(st.noise.isZero());

  Rng r1(1), r2(2);
  const auto t1 = model.grouping().project(block, StageOptions{.mode = Mode::kTrain, .rng = &r1});
  const auto t2 = model.grouping().project(block, StageOptions{.mode = Mode::kTrain, .rng = &r2});
  CHECK_FALSE(testing::bitwise_equal(t1.stages[0].noise, t2.stages[0].noise));
  CHECK_FALSE(testing::bitwise_equal(t1.stages[0].assignment.value(), t2.stages[0].assignment.value()));
}

TEST_CASE("argmax is invariant to positive feature scaling") {
  const Mat c = random_mat(5, 8, 11);
  const Mat x = random_mat(12, 8, 12);
  const Var tau = ag::constant(Mat::Ones(1, 1));
  const Mat base = column_onehot(soft_assignment(ag::constant(c), ag::constant(x), tau, Mat::Zero(5, 12)).value());
  for (double s : {1e-3, 0.5, 7.0, 1e4}) {
    const Mat scaled =
        column_onehot(soft_assignment(ag::constant(c * s), ag::constant(x * s), tau, Mat::Zero(5, 12)).value());
    CHECK(base == scaled);
  }
}

TEST_CASE("non-positive temperature is rejected") {
  ModelConfig cfg;
  Model model(cfg);
  const auto block = random_block(cfg, 16, 7);
  CHECK_ERROR_KIND(model.grouping().project(block, StageOptions{.tau_override = 0.0}), ErrorKind::kInvalidParameter);
  CHECK_ERROR_KIND(model.grouping().project(block, StageOptions{.tau_override = -1.0}),
                   ErrorKind::kInvalidParameter);
  CHECK_ERROR_KIND(soft_assignment(ag::constant(Mat::Ones(2, 3)), ag::constant(Mat::Ones(4, 3)),
                                   ag::constant(Mat::Zero(1, 1)), Mat::Zero(2, 4)),
                   ErrorKind::kInvalidParameter);
}

TEST_CASE("empty concepts keep their residual row") {
  ModelConfig cfg;
  Model model(cfg);
  // With 16 patches over 8 concepts some concepts usually go unused.
  int empty_seen = 0;
  for (int seed = 0; seed < 10 && empty_seen == 0; ++seed) {
    const auto block = random_block(cfg, 16, 40 + seed);
    auto [next, st] = model.grouping().stage_forward(0, ag::constant(block.features), StageOptions{});
    for (std::size_t i = 0; i < st.counts.size(); ++i) {
      if (st.counts[i] != 0.0) continue;
      ++empty_seen;
      const auto row = static_cast<Eigen::Index>(i);
      CHECK(testing::bitwise_equal(next.value().row(row), st.concepts_hat.value().row(row)));
    }
  }
  CHECK(empty_seen > 0);
}

TEST_CASE("linear projection baseline") {
  const Mat x = random_mat(6, 5, 21);
  const Var xi = ag::constant(x);
  CHECK(testing::bitwise_equal(linear_project(xi, ag::constant(Mat::Identity(5, 5))).value(), x));
  CHECK(linear_project(xi, ag::constant(Mat::Zero(5, 3))).value().isZero());

  const Mat w = random_mat(5, 3, 22);
  const Mat b = random_mat(1, 3, 23);
  const Var bv = ag::constant(b);
  const Mat y = linear_project(xi, ag::constant(w), &bv).value();
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = b(0, j);
      for (int k = 0; k < 5; ++k) acc += x(i, k) * w(k, j);
      CHECK(std::abs(y(i, j) - acc) < 1e-6);
    }
  }
  CHECK_ERROR_KIND(linear_project(xi, ag::constant(Mat::Zero(4, 3))), ErrorKind::kShapeMismatch);

  ModelConfig cfg;
  cfg.grouping.kind = InputProjectionKind::kLinear;
  Model model(cfg);
  const auto out = model.grouping().project(random_block(cfg, 16, 24), StageOptions{});
  CHECK(out.features.rows() == 16);
  CHECK(out.features.cols() == cfg.llm.dim);
}
