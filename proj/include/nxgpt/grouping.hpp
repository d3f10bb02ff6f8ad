#pragma once

#include <optional>
#include <vector>

#include "nxgpt/autograd.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/encoders.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {

class Rng;

// G_ij = -log(-log(U_ij)) with U drawn from the open interval (0, 1).
double gumbel_from_uniform(double u);
Mat sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// The discrete pieces of one stage's assignment: the one-hot argmax, the
// value that stop-gradient froze, and the noise. Recording these and
// replaying them turns the straight-through forward into a smooth function
// of the parameters whose true derivative is the straight-through gradient.
struct AssignmentSnapshot {
  Mat onehot;
  Mat frozen_soft;
  Mat noise;
};

struct AssignmentReplay {
  enum class Action { kRecord, kReplay };
  Action action = Action::kRecord;
  std::vector<AssignmentSnapshot> stages;
};

struct ConceptStageState {
  int stage = 0;
  Var concepts_hat;     // M_l x d, updated concepts
  Var inputs_hat;       // N_l x d, updated inputs
  Var similarity;       // M_l x N_l, Norm(C^) Norm(X^)^T
  Var assignment;       // A: softmax over concepts for every input column
  Var hard_assignment;  // A^: one-hot forward, straight-through backward
  Mat noise;            // G
  double tau = 1.0;
  std::vector<double> counts;  // inputs assigned to each concept
};

struct GroupingOutput {
  Modality modality = Modality::kImage;
  Var features;  // M_L x d (or N x d_llm for the linear baseline)
  std::vector<ConceptStageState> stages;
};

struct StageOptions {
  Mode mode = Mode::kEval;
  Rng* rng = nullptr;                    // required in train mode
  std::optional<double> tau_override;    // replaces exp(rho) when set
  AssignmentReplay* replay = nullptr;
};

// Soft assignment A = softmax_concepts((Norm(C) Norm(X)^T + G) / tau).
Var soft_assignment(const Var& concepts, const Var& inputs, const Var& tau, const Mat& noise);
// A^ = Onehot(Argmax(A)) + A - Sg(A), argmax per column. When snapshot is
// given its one-hot and frozen value are used instead of recomputing them.
Var straight_through(const Var& soft, const AssignmentSnapshot* snapshot = nullptr);
// Column-wise one-hot of the argmax (ties resolve to the lowest row).
Mat column_onehot(const Mat& m);

class GroupingProjector {
 public:
  static void register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  GroupingProjector(const ParamStore& store, const ModelConfig& cfg) : store_(&store), cfg_(cfg) {}

  // One grouping stage: transformer over [C; X], Gumbel-softmax assignment,
  // straight-through hardening and X' = C^ + MLP(Aggregate(A^, X^)).
  std::pair<Var, ConceptStageState> stage_forward(int stage, const Var& inputs, const StageOptions& opt,
                                                  int replay_index = -1) const;

  // Runs every stage; eval mode is deterministic.
  GroupingOutput project(const ModalityFeatureBlock& block, const StageOptions& opt) const;
  GroupingOutput project(const Var& features, Modality modality, const StageOptions& opt) const;

  // Maps projector output into the LLM embedding space. For the linear
  // baseline the projector output already lives there.
  Var to_llm(const GroupingOutput& out) const;

  int output_tokens(int input_tokens) const;

 private:
  const ParamStore* store_;
  ModelConfig cfg_;
};

// Per-token affine baseline: X W (+ b), no grouping.
Var linear_project(const Var& features, const Var& weight, const Var* bias = nullptr);

}  // namespace nxgpt
