#include "nxgpt/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "nxgpt/error.hpp"
#include "nxgpt/nn.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

namespace {

constexpr int kTimeFreqs = 8;

std::string prefix(Modality m) { return "diffusion." + std::string(to_string(m)); }

void check_t(int t, int steps) {
  if (t < 1 || t > steps) {
    throw Error(ErrorKind::kOutOfRange, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  double bar = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw Error(ErrorKind::kInvalidParameter, "betas must lie in (0, 1)");
    s.alphas.push_back(1.0 - b);
    bar *= 1.0 - b;
    s.alpha_bars.push_back(bar);
  }
  s.betas = std::move(betas);
  return s;
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw Error(ErrorKind::kInvalidParameter, "schedule needs at least one step");
  std::vector<double> b(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    b[static_cast<std::size_t>(i)] =
        steps == 1 ? beta_end : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
  }
  return from_betas(std::move(b));
}

double NoiseSchedule::beta(int t) const {
  check_t(t, steps());
  return betas[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const {
  check_t(t, steps());
  return alphas[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check_t(t, steps());
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

Mat q_sample(const Mat& x0, int t, const Mat& eps, const NoiseSchedule& schedule) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw Error(ErrorKind::kShapeMismatch, "q_sample shapes");
  const double ab = schedule.alpha_bar(t);
  if (t == 0) throw Error(ErrorKind::kOutOfRange, "timestep 0 outside [1, T]");
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

int latent_dim(Modality m) {
  switch (m) {
    case Modality::kImage: return 2;
    case Modality::kAudio: return 1;
    case Modality::kVideo: return 4;
    case Modality::kText: break;
  }
  throw Error(ErrorKind::kWrongModality, "text has no diffusion decoder");
}

Mat timestep_features(std::span<const int> t, int steps) {
  Mat f(static_cast<Eigen::Index>(t.size()), 2 * kTimeFreqs);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double x = static_cast<double>(t[i]) / steps;
    for (int k = 0; k < kTimeFreqs; ++k) {
      const double w = std::numbers::pi * std::pow(2.0, k) * x;
      f(static_cast<Eigen::Index>(i), 2 * k) = std::sin(w);
      f(static_cast<Eigen::Index>(i), 2 * k + 1) = std::cos(w);
    }
  }
  return f;
}

Var denoise_objective(const Mat& x0, int draws, const NoiseSchedule& schedule, Rng& rng,
                      const NoisePredictor& predictor) {
  if (x0.rows() != 1 && x0.rows() != draws) throw Error(ErrorKind::kShapeMismatch, "x0 must have 1 or `draws` rows");
  const Eigen::Index d = x0.cols();
  Mat xt(draws, d);
  Mat eps(draws, d);
  std::vector<int> ts(static_cast<std::size_t>(draws));
  for (int i = 0; i < draws; ++i) {
    const int t = 1 + rng.below(schedule.steps());
    ts[static_cast<std::size_t>(i)] = t;
    for (Eigen::Index j = 0; j < d; ++j) eps(i, j) = rng.normal();
    const Mat row0 = x0.row(x0.rows() == 1 ? 0 : i);
    xt.row(i) = q_sample(row0, t, eps.row(i), schedule);
  }
  Var loss = ag::mse(predictor(xt, ts), ag::constant(eps));
  if (!std::isfinite(loss.item())) throw Error(ErrorKind::kNumeric, "denoising loss is not finite");
  return loss;
}

void ToyDiffusion::register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  const int h = cfg.diffusion.hidden;
  const int dc = cfg.diffusion.cond_dim;
  for (Modality m : kGeneratedModalities) {
    const std::string p = prefix(m);
    nn::add_linear(store, p + ".fc1", latent_dim(m) + 2 * kTimeFreqs, h, Role::kFrozen, rng);
    nn::add_linear(store, p + ".film1", dc, 2 * h, Role::kFrozen, rng, 0.1 / std::sqrt(static_cast<double>(dc)));
    nn::add_linear(store, p + ".fc2", h, h, Role::kFrozen, rng);
    nn::add_linear(store, p + ".film2", dc, 2 * h, Role::kFrozen, rng, 0.1 / std::sqrt(static_cast<double>(dc)));
    nn::add_linear(store, p + ".fc3", h, h, Role::kFrozen, rng);
    nn::add_linear(store, p + ".out", h, latent_dim(m), Role::kFrozen, rng);
  }
}

ToyDiffusion::ToyDiffusion(const ParamStore& store, const ModelConfig& cfg)
    : store_(&store),
      cfg_(cfg),
      schedule_(NoiseSchedule::linear(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)) {}

namespace {

Var film(const ParamStore& store, const std::string& name, const Var& h, const Var& cond) {
  Var gb = nn::linear(store, name, cond);
  const Eigen::Index width = h.cols();
  Var gamma = ag::add_scalar(ag::slice_cols(gb, 0, width), 1.0);
  return ag::add(ag::mul(h, gamma), ag::slice_cols(gb, width, width));
}

}  // namespace

Var ToyDiffusion::predict_noise(Modality m, const Mat& x_t, std::span<const int> t, const Var& cond_pooled) const {
  if (x_t.cols() != latent_dim(m)) throw Error(ErrorKind::kShapeMismatch, "latent width");
  if (cond_pooled.rows() != x_t.rows() || cond_pooled.cols() != cfg_.diffusion.cond_dim) {
    throw Error(ErrorKind::kShapeMismatch, "condition must be B x cond_dim");
  }
  for (int ti : t) check_t(ti, schedule_.steps());
  const std::string p = prefix(m);
  Mat in(x_t.rows(), x_t.cols() + 2 * kTimeFreqs);
  in << x_t, timestep_features(t, schedule_.steps());
  Var h = ag::silu(film(*store_, p + ".film1", nn::linear(*store_, p + ".fc1", ag::constant(in)), cond_pooled));
  h = ag::silu(film(*store_, p + ".film2", nn::linear(*store_, p + ".fc2", h), cond_pooled));
  h = ag::silu(nn::linear(*store_, p + ".fc3", h));
  return nn::linear(*store_, p + ".out", h);
}

Var ToyDiffusion::denoise_loss(Modality m, const Mat& x0, const Var& cond, Rng& rng, int draws) const {
  if (cond.rows() != cfg_.outproj.queries || cond.cols() != cfg_.diffusion.cond_dim) {
    throw Error(ErrorKind::kShapeMismatch, "condition must be Q x cond_dim");
  }
  Var pooled = ag::row_mean(cond);
  Var rows = ag::matmul(ag::constant(Mat::Ones(draws, 1)), pooled);
  return denoise_objective(x0, draws, schedule_, rng, [&](const Mat& xt, std::span<const int> t) {
    return predict_noise(m, xt, t, rows);
  });
}

Var ToyDiffusion::denoise_loss_pooled(Modality m, const Mat& x0, const Var& cond_pooled, Rng& rng) const {
  return denoise_objective(x0, static_cast<int>(x0.rows()), schedule_, rng,
                           [&](const Mat& xt, std::span<const int> t) { return predict_noise(m, xt, t, cond_pooled); });
}

std::vector<LatentSample> ToyDiffusion::sample(Modality m, const Mat& cond, Rng& rng, int count) const {
  if (!trained(m)) {
    throw Error(ErrorKind::kUntrainedBackbone,
                std::string(to_string(m)) + " diffusion backbone has not been pretrained; run pretrain first");
  }
  if (cond.rows() != cfg_.outproj.queries || cond.cols() != cfg_.diffusion.cond_dim) {
    throw Error(ErrorKind::kShapeMismatch, "condition must be Q x cond_dim");
  }
  ag::NoGradGuard no_grad;
  const int d = latent_dim(m);
  Var pooled = ag::constant(Mat::Ones(count, 1) * cond.colwise().mean());
  Mat x(count, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  std::vector<int> ts(static_cast<std::size_t>(count));
  for (int t = schedule_.steps(); t >= 1; --t) {
    std::fill(ts.begin(), ts.end(), t);
    const Mat eps = predict_noise(m, x, ts, pooled).value();
    const double beta = schedule_.beta(t);
    const double ab = schedule_.alpha_bar(t);
    Mat mean = (x - (beta / std::sqrt(1.0 - ab)) * eps) / std::sqrt(schedule_.alpha(t));
    if (t > 1) {
      const double var = beta * (1.0 - schedule_.alpha_bar(t - 1)) / (1.0 - ab);
      const double sd = std::sqrt(var);
      for (Eigen::Index i = 0; i < mean.size(); ++i) mean.data()[i] += sd * rng.normal();
    }
    x = std::move(mean);
  }
  std::vector<LatentSample> out;
  for (int i = 0; i < count; ++i) out.push_back(LatentSample{m, x.row(i)});
  return out;
}

}  // namespace nxgpt
