#include "nxgpt/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nxgpt/error.hpp"
#include "nxgpt/nn.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

double gumbel_from_uniform(double u) {
  // Keep U strictly inside (0, 1) so the double log stays finite.
  constexpr double kEps = 1e-12;
  u = std::clamp(u, kEps, 1.0 - kEps);
  return -std::log(-std::log(u));
}

Mat sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = gumbel_from_uniform(rng.uniform_open());
  return g;
}

Var soft_assignment(const Var& concepts, const Var& inputs, const Var& tau, const Mat& noise) {
  if (tau.item() <= 0.0 || !std::isfinite(tau.item())) {
    throw Error(ErrorKind::kInvalidParameter, "grouping temperature must be positive");
  }
  Var sim = ag::matmul_nt(ag::l2_normalize_rows(concepts), ag::l2_normalize_rows(inputs));
  Var logits = ag::div_by_scalar(ag::add(sim, ag::constant(noise)), tau);
  return ag::softmax_cols(logits);
}

Mat column_onehot(const Mat& m) {
  Mat out = Mat::Zero(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    Eigen::Index best = 0;
    m.col(j).maxCoeff(&best);
    out(best, j) = 1.0;
  }
  return out;
}

Var straight_through(const Var& soft, const AssignmentSnapshot* snapshot) {
  const Mat onehot = snapshot ? snapshot->onehot : column_onehot(soft.value());
  Var frozen = snapshot ? ag::constant(snapshot->frozen_soft) : ag::stop_gradient(soft);
  // (A - Sg(A)) is exactly zero in the forward pass, so the sum below is
  // exactly the one-hot matrix.
  return ag::add(ag::constant(onehot), ag::sub(soft, frozen));
}

namespace {

std::string stage_prefix(int l) { return "grouping.stage" + std::to_string(l); }

void check_finite(const Var& v, const char* what) {
  if (!v.value().allFinite()) throw Error(ErrorKind::kNumeric, std::string("non-finite values in ") + what);
}

}  // namespace

void GroupingProjector::register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.feature_dim;
  if (cfg.grouping.kind == InputProjectionKind::kLinear) {
    nn::add_linear(store, "grouping.linear", d, cfg.llm.dim, Role::kTrainable, rng);
    return;
  }
  for (std::size_t l = 0; l < cfg.grouping.stage_sizes.size(); ++l) {
    const std::string p = stage_prefix(static_cast<int>(l));
    store.add_normal(p + ".concepts", cfg.grouping.stage_sizes[l], d, 1.0, Role::kTrainable, rng);
    store.add_constant(p + ".tau", 1, 1, 0.0, Role::kTrainable);  // log-temperature rho
    nn::add_block(store, p + ".block", d, 4 * d, Role::kTrainable, rng);
    nn::add_mlp(store, p + ".agg", d, d, d, Role::kTrainable, rng);
  }
  // Small init keeps concept rows near the scale of token embeddings.
  nn::add_linear(store, "grouping.out", d, cfg.llm.dim, Role::kTrainable, rng, 0.005);
}

int GroupingProjector::output_tokens(int input_tokens) const {
  if (cfg_.grouping.kind == InputProjectionKind::kLinear) return input_tokens;
  return cfg_.grouping.stage_sizes.back();
}

std::pair<Var, ConceptStageState> GroupingProjector::stage_forward(int stage, const Var& inputs,
                                                                   const StageOptions& opt,
                                                                   int replay_index) const {
  if (inputs.rows() < 1) throw Error(ErrorKind::kShapeMismatch, "grouping needs at least one input token");
  if (inputs.cols() != cfg_.feature_dim) throw Error(ErrorKind::kShapeMismatch, "grouping input width");
  const std::string p = stage_prefix(stage);
  Var concepts = store_->get(p + ".concepts");
  const Eigen::Index m = concepts.rows();
  const Eigen::Index n = inputs.rows();

  ConceptStageState st;
  st.stage = stage;
  std::vector<Var> parts = {concepts, inputs};
  Var mixed = nn::block(*store_, p + ".block", ag::concat_rows(parts), nn::BlockOptions{.heads = cfg_.grouping.heads});
  check_finite(mixed, "grouping transformer");
  st.concepts_hat = ag::slice_rows(mixed, 0, m);
  st.inputs_hat = ag::slice_rows(mixed, m, n);

  Var tau;
  if (opt.tau_override) {
    if (!(*opt.tau_override > 0.0)) throw Error(ErrorKind::kInvalidParameter, "grouping temperature must be positive");
    tau = ag::constant(Mat::Constant(1, 1, *opt.tau_override));
  } else {
    tau = ag::exp(store_->get(p + ".tau"));
  }
  st.tau = tau.item();

  const AssignmentSnapshot* snap = nullptr;
  if (opt.replay && opt.replay->action == AssignmentReplay::Action::kReplay) {
    snap = &opt.replay->stages.at(static_cast<std::size_t>(replay_index));
  }
  if (snap) {
    st.noise = snap->noise;
  } else if (opt.mode == Mode::kTrain) {
    if (!opt.rng) throw Error(ErrorKind::kInvalidParameter, "train-mode grouping needs an rng");
    st.noise = sample_gumbel(m, n, *opt.rng);
  } else {
    st.noise = Mat::Zero(m, n);
  }

  st.similarity = ag::matmul_nt(ag::l2_normalize_rows(st.concepts_hat), ag::l2_normalize_rows(st.inputs_hat));
  st.assignment = soft_assignment(st.concepts_hat, st.inputs_hat, tau, st.noise);
  check_finite(st.assignment, "grouping assignment");
  st.hard_assignment = straight_through(st.assignment, snap);

  const Mat& hard = snap ? snap->onehot : st.hard_assignment.value();
  if (opt.replay && opt.replay->action == AssignmentReplay::Action::kRecord) {
    opt.replay->stages.push_back({st.hard_assignment.value(), st.assignment.value(), st.noise});
  }

  // Count-normalised pooling; the counts come from the discrete assignment.
  st.counts.resize(static_cast<std::size_t>(m));
  std::vector<double> divisor(static_cast<std::size_t>(m));
  Mat occupied(m, 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double c = hard.row(i).sum();
    st.counts[static_cast<std::size_t>(i)] = c;
    divisor[static_cast<std::size_t>(i)] = std::max(c, 1.0);
    occupied(i, 0) = c > 0.0 ? 1.0 : 0.0;
  }
  Var pooled = ag::div_rows_const(ag::matmul(st.hard_assignment, st.inputs_hat), divisor);
  // Empty concepts keep only their residual C^ row.
  Var update = ag::mul_col(nn::mlp(*store_, p + ".agg", pooled), ag::constant(occupied));
  Var next = ag::add(st.concepts_hat, update);
  check_finite(next, "grouping output");
  return {next, std::move(st)};
}

GroupingOutput GroupingProjector::project(const ModalityFeatureBlock& block, const StageOptions& opt) const {
  return project(ag::constant(block.features), block.modality, opt);
}

GroupingOutput GroupingProjector::project(const Var& features, Modality modality, const StageOptions& opt) const {
  GroupingOutput out;
  out.modality = modality;
  if (cfg_.grouping.kind == InputProjectionKind::kLinear) {
    Var b = store_->get("grouping.linear.b");
    out.features = linear_project(features, store_->get("grouping.linear.w"), &b);
    return out;
  }
  Var x = features;
  for (std::size_t l = 0; l < cfg_.grouping.stage_sizes.size(); ++l) {
    auto [next, st] = stage_forward(static_cast<int>(l), x, opt, static_cast<int>(l));
    out.stages.push_back(std::move(st));
    x = next;
  }
  out.features = x;
  return out;
}

Var GroupingProjector::to_llm(const GroupingOutput& out) const {
  if (cfg_.grouping.kind == InputProjectionKind::kLinear) return out.features;
  return nn::linear(*store_, "grouping.out", out.features);
}

Var linear_project(const Var& features, const Var& weight, const Var* bias) {
  if (features.cols() != weight.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "linear projection expects d_in = " + std::to_string(weight.rows()));
  }
  Var y = ag::matmul(features, weight);
  return bias ? ag::add_row(y, *bias) : y;
}

}  // namespace nxgpt
