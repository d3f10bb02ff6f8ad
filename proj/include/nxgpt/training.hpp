#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "nxgpt/autograd.hpp"
#include "nxgpt/data.hpp"
#include "nxgpt/params.hpp"
#include "nxgpt/vocab.hpp"

namespace nxgpt {

class Model;
class Rng;

struct LossWeights {
  double nll = 1.0;
  double align = 1.0;
  double denoise = 1.0;
};

struct StageRecipe {
  int stage = 1;
  std::string optimizer = "Adam";
  double lr = 4e-4;
  double weight_decay = 1e-3;
  int epochs = 1;
  double warmup_ratio = 0.1;
  std::string scheduler = "Linear";
  int batch_size = 8;
  int max_tokens = 512;
  bool unfreeze_llm = false;  // through LoRA only
  LossWeights weights;
  // Optimizer steps; 0 derives epochs * ceil(examples / batch_size).
  int steps = 0;
  // Stage 3 generation-loss terms, individually switchable.
  bool stage3_align = true;
  bool stage3_denoise = true;
  int denoise_draws = 4;

  // The published recipe for each stage.
  static StageRecipe paper(int stage);
  // Practical defaults for the desk-scale model.
  static StageRecipe desk(int stage);

  int total_steps(std::size_t examples) const;
  nlohmann::json to_json() const;
};

struct LossBreakdown {
  double total = 0;
  double ce_text = 0;
  double nll_signal = 0;
  double align_l2 = 0;
  double denoise = 0;

  nlohmann::json to_json() const;
};

// A differentiable total and its parts. total == ce_text + nll * nll_signal
// + align * align_l2 + denoise * denoise.
struct StepLoss {
  Var total;
  LossBreakdown parts;
};

// Linear warmup from 0 to peak over warmup_ratio of the steps, then linear
// decay to 0 at total_steps.
double lr_at(int step, int total_steps, double warmup_ratio, double peak);

// Adam with coupled L2 weight decay over parameters that require grad.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);
  void step(ParamStore& store, double lr);
  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  int t_ = 0;
  std::unordered_map<std::string, std::pair<Mat, Mat>> moments_;
};

// --- losses ------------------------------------------------------------------

// Teacher-forced caption CE through the input projection (train mode uses
// Gumbel noise from rng).
StepLoss stage1_loss(const Model& model, std::span<const CaptionPair* const> batch, Mode mode, Rng& rng);
// Signal-token NLL + caption alignment + conditional denoising.
StepLoss stage2_loss(const Model& model, std::span<const CaptionPair* const> batch, const StageRecipe& recipe,
                     Mode mode, Rng& rng);
// Response CE (text and signal tokens) + generation loss on gold outputs.
StepLoss stage3_loss(const Model& model, std::span<const Dialogue* const> batch, const StageRecipe& recipe,
                     Mode mode, Rng& rng);

// --- stage driver ------------------------------------------------------------

struct StepRecord {
  int stage = 0;
  int step = 0;
  double lr = 0;
  LossBreakdown loss;

  nlohmann::json to_json() const;
};

using MetricsSink = std::function<void(const StepRecord&)>;

// Sets requires_grad to exactly trainable_mask(stage).
void apply_mask(Model& model, int stage);

// Fails with kDependency unless the model has completed the steps the stage
// builds on.
void check_prerequisites(const Model& model, int stage);

struct StageResult {
  int steps = 0;
  LossBreakdown last;
};

// Runs the recipe on the stage's part of the dataset (pairs for stages 1
// and 2, T2M plus MosIT dialogues for stage 3) and marks the stage done.
StageResult run_stage(int stage, const StageRecipe& recipe, const Dataset& ds, Model& model, Rng& rng,
                      const MetricsSink& sink = {});
// Same on explicit examples.
StageResult train_stage1(Model& model, std::span<const CaptionPair> pairs, const StageRecipe& recipe, Rng& rng,
                         const MetricsSink& sink = {});
StageResult train_stage2(Model& model, std::span<const CaptionPair> pairs, const StageRecipe& recipe, Rng& rng,
                         const MetricsSink& sink = {});
StageResult train_stage3(Model& model, std::span<const Dialogue> dialogues, const StageRecipe& recipe, Rng& rng,
                         const MetricsSink& sink = {});

// --- backbone pretraining -------------------------------------------------------

struct PretrainOptions {
  int steps = 300;
  int batch_size = 8;
  double lr = 3e-3;
};

// Language-model pretraining of llm.base.* on text, after which the base
// stays frozen.
StageResult pretrain_llm(Model& model, const std::vector<TokenSequence>& texts, const PretrainOptions& opt, Rng& rng,
                         const MetricsSink& sink = {});
// Moves signal-token embeddings next to the pretrained pad embedding, which
// the base model has learned to read past, keeping a small random part so
// the tokens stay distinguishable. pretrain_llm calls this itself.
void seed_signal_rows(Model& model);
// Caption-conditioned denoising pretraining of every diffusion backbone on
// freshly sampled latents.
StageResult pretrain_diffusion(Model& model, const PretrainOptions& opt, Rng& rng, const MetricsSink& sink = {});

// --- evaluation --------------------------------------------------------------

// Token-weighted caption CE (nats/token) in eval mode.
double caption_ce(const Model& model, std::span<const CaptionPair> pairs);

struct AlignmentEval {
  double signal_accuracy = 0;  // teacher-forced argmax over signal targets
  double mean_cosine = 0;      // projected vs conditioner, rows then samples
  double align_l2 = 0;
};
AlignmentEval evaluate_alignment(const Model& model, std::span<const CaptionPair> pairs);

struct DialogueEval {
  int machine_turns = 0;
  double emission_accuracy = 0;   // emitted signal subsequence equals gold
  double activation_match = 0;    // activated modality set equals gold
  double text_exact = 0;          // emitted text equals gold text
};
// Free-running greedy replies after the gold history of every machine turn.
DialogueEval evaluate_dialogues(const Model& model, std::span<const Dialogue> dialogues, int max_new = 64);

// --- gradient checking -----------------------------------------------------------

struct GradCheckReport {
  std::string selector;
  int coordinates = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
};

// selector: "grouping", "outproj" or "denoise-cond". Central differences
// with step h against the analytic gradient on sampled coordinates of a
// randomly initialised desk model. corrupt_gradient perturbs the analytic
// side to show the harness notices.
GradCheckReport grad_check(const std::string& selector, std::uint64_t seed, int coordinates = 100, double h = 1e-5,
                           bool corrupt_gradient = false);

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-6);

}  // namespace nxgpt
