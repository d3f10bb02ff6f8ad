#pragma once

#include <functional>
#include <set>
#include <span>
#include <vector>

#include "nxgpt/autograd.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/params.hpp"

namespace nxgpt {

class Rng;

struct NoiseSchedule {
  std::vector<double> betas;       // beta_t at index t-1
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s

  static NoiseSchedule linear(int steps, double beta_start, double beta_end);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas.size()); }
  double beta(int t) const;
  double alpha(int t) const;
  // alpha_bar(0) == 1 by convention.
  double alpha_bar(int t) const;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for 1 <= t <= T.
Mat q_sample(const Mat& x0, int t, const Mat& eps, const NoiseSchedule& schedule);

// Toy latent width per decoder: image 2, audio 1, video 4.
int latent_dim(Modality m);

struct LatentSample {
  Modality modality = Modality::kImage;
  Mat values;  // 1 x latent_dim
};

// Predicts eps for a batch: x_t is B x D, one timestep per row.
using NoisePredictor = std::function<Var(const Mat& x_t, std::span<const int> t)>;

// Mean over draws and dims of (eps - eps_hat)^2 with t ~ U{1..T} and
// eps ~ N(0, I), one draw per row.
Var denoise_objective(const Mat& x0, int draws, const NoiseSchedule& schedule, Rng& rng,
                      const NoisePredictor& predictor);

// Conditional epsilon-prediction MLP per modality with FiLM modulation from
// the mean-pooled condition sequence; sampling is ancestral DDPM.
class ToyDiffusion {
 public:
  static void register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  ToyDiffusion(const ParamStore& store, const ModelConfig& cfg);

  const NoiseSchedule& schedule() const { return schedule_; }

  // cond_pooled: B x d_c (one row per batch row).
  Var predict_noise(Modality m, const Mat& x_t, std::span<const int> t, const Var& cond_pooled) const;

  // cond: Q x d_c condition sequence. Gradients flow into cond.
  Var denoise_loss(Modality m, const Mat& x0, const Var& cond, Rng& rng, int draws = 1) const;
  // Batched pretraining form: row i of x0 is conditioned on row i of cond_pooled.
  Var denoise_loss_pooled(Modality m, const Mat& x0, const Var& cond_pooled, Rng& rng) const;

  void mark_trained(Modality m) { trained_.insert(m); }
  bool trained(Modality m) const { return trained_.count(m) != 0; }

  // Draws `count` samples conditioned on cond (Q x d_c). Refuses to run on an
  // untrained backbone.
  std::vector<LatentSample> sample(Modality m, const Mat& cond, Rng& rng, int count = 1) const;

 private:
  const ParamStore* store_;
  ModelConfig cfg_;
  NoiseSchedule schedule_;
  std::set<Modality> trained_;
};

// Sinusoidal timestep features, one row per t.
Mat timestep_features(std::span<const int> t, int steps);

}  // namespace nxgpt
