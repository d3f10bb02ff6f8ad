#include "nxgpt/outproj.hpp"

#include <cmath>
#include <string>

#include "nxgpt/error.hpp"
#include "nxgpt/nn.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/vocab.hpp"

namespace nxgpt {

namespace {

std::string prefix(Modality m) { return "outproj." + std::string(to_string(m)); }

}  // namespace

void OutputProjection::register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  const auto& oc = cfg.outproj;
  const int h = oc.hidden;
  for (Modality m : kGeneratedModalities) {
    const std::string p = prefix(m);
    const int k = cfg.signal_count(m);
    store.add_normal(p + ".signal_embed", k, cfg.llm.dim, 0.05, Role::kTrainable, rng);
    store.add_normal(p + ".signal_head", k, cfg.llm.dim, 0.02, Role::kTrainable, rng);
    nn::add_linear(store, p + ".in", cfg.llm.dim, h, Role::kTrainable, rng);
    store.add_normal(p + ".pos", k, h, 0.1, Role::kTrainable, rng);
    for (int i = 0; i < oc.enc_layers; ++i) {
      nn::add_block(store, p + ".enc" + std::to_string(i), h, 4 * h, Role::kTrainable, rng);
    }
    store.add_normal(p + ".queries", oc.queries, h, 0.5, Role::kTrainable, rng);
    for (int i = 0; i < oc.dec_layers; ++i) {
      nn::add_decoder_block(store, p + ".dec" + std::to_string(i), h, 4 * h, Role::kTrainable, rng);
    }
    nn::add_layer_norm(store, p + ".ln_out", h, Role::kTrainable);
    nn::add_linear(store, p + ".out", h, cfg.diffusion.cond_dim, Role::kTrainable, rng);
  }
}

ConditionEmbedding OutputProjection::project_signal(const Var& states, Modality modality, Mode mode,
                                                    Rng* rng) const {
  if (modality == Modality::kText) throw Error(ErrorKind::kWrongModality, "text has no output projection");
  const int k = cfg_.signal_count(modality);
  if (states.rows() != k) {
    throw Error(ErrorKind::kSignalCountMismatch, std::string(to_string(modality)) + " expects " + std::to_string(k) +
                                                     " signal states, got " + std::to_string(states.rows()));
  }
  if (states.cols() != cfg_.llm.dim) throw Error(ErrorKind::kShapeMismatch, "signal states must have LLM width");
  const auto& oc = cfg_.outproj;
  const double p_drop = mode == Mode::kTrain ? oc.dropout : 0.0;
  if (p_drop > 0 && !rng) throw Error(ErrorKind::kInvalidParameter, "train-mode projection needs an rng");
  const nn::BlockOptions opt{.heads = oc.heads, .causal = false, .lora = nullptr, .dropout = p_drop, .rng = rng};

  const std::string p = prefix(modality);
  Var x = ag::add(nn::linear(*store_, p + ".in", states), store_->get(p + ".pos"));
  for (int i = 0; i < oc.enc_layers; ++i) x = nn::block(*store_, p + ".enc" + std::to_string(i), x, opt);
  Var q = store_->get(p + ".queries");
  for (int i = 0; i < oc.dec_layers; ++i) q = nn::decoder_block(*store_, p + ".dec" + std::to_string(i), q, x, opt);
  Var out = nn::linear(*store_, p + ".out", nn::layer_norm(*store_, p + ".ln_out", q));
  if (!out.value().allFinite()) throw Error(ErrorKind::kNumeric, "non-finite output projection");
  return ConditionEmbedding{out, ConditionEmbedding::Source::kProjectedSignal};
}

Var caption_align_loss(const Var& projected, const Var& target) {
  if (projected.rows() != target.rows() || projected.cols() != target.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "alignment loss needs equal shapes");
  }
  Var diff = ag::sub(projected, target);
  return ag::scale(ag::sum(ag::mul(diff, diff)), 1.0 / static_cast<double>(projected.rows()));
}

double mean_row_cosine(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
    throw Error(ErrorKind::kShapeMismatch, "cosine needs equal non-empty shapes");
  }
  double total = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double den = a.row(i).norm() * b.row(i).norm();
    total += den > 0 ? a.row(i).dot(b.row(i)) / den : 0.0;
  }
  return total / static_cast<double>(a.rows());
}

void CaptionConditioner::register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  const int dc = cfg.diffusion.cond_dim;
  for (Modality m : kGeneratedModalities) {
    const std::string p = "conditioner." + std::string(to_string(m));
    store.add_normal(p + ".char_embed", kTextVocabSize, dc, 1.0, Role::kFrozen, rng);
    store.add_normal(p + ".slot", cfg.outproj.queries, dc, 0.5, Role::kFrozen, rng);
    store.add_normal(p + ".w", dc, dc, 1.5 / std::sqrt(static_cast<double>(dc)), Role::kFrozen, rng);
  }
}

ConditionEmbedding CaptionConditioner::encode(std::string_view caption, Modality modality) const {
  if (modality == Modality::kText) throw Error(ErrorKind::kWrongModality, "text has no conditioner");
  const std::string p = "conditioner." + std::string(to_string(modality));
  const TokenSequence ids = tokenize(caption);
  const Mat& table = store_->value(p + ".char_embed");
  const Mat& slot = store_->value(p + ".slot");
  const Eigen::Index q = slot.rows();
  const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
  Mat pooled = slot;
  for (Eigen::Index s = 0; s < q; ++s) {
    const Eigen::Index lo = s * n / q;
    const Eigen::Index hi = (s + 1) * n / q;
    if (hi <= lo) continue;
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(table.cols());
    for (Eigen::Index i = lo; i < hi; ++i) acc += table.row(ids[static_cast<std::size_t>(i)]);
    pooled.row(s) += acc / static_cast<double>(hi - lo);
  }
  Mat out = (pooled * store_->value(p + ".w")).array().tanh().matrix();
  return ConditionEmbedding{ag::constant(out), ConditionEmbedding::Source::kCaptionEncoded};
}

}  // namespace nxgpt
