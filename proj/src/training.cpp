#include "nxgpt/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "nxgpt/error.hpp"
#include "nxgpt/llm.hpp"
#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/routing.hpp"
#include "nxgpt/sequence.hpp"

namespace nxgpt {

// --- recipes -------------------------------------------------------------------

StageRecipe StageRecipe::paper(int stage) {
  StageRecipe r;
  r.stage = stage;
  switch (stage) {
    case 1: r.lr = 0.0004; r.batch_size = 18; r.unfreeze_llm = false; break;
    case 2: r.lr = 0.0004; r.batch_size = 8; r.unfreeze_llm = false; break;
    case 3: r.lr = 0.0005; r.batch_size = 4; r.unfreeze_llm = true; break;
    default: throw Error(ErrorKind::kInvalidParameter, "unknown training stage " + std::to_string(stage));
  }
  r.weight_decay = 0.001;
  r.epochs = 1;
  r.warmup_ratio = 0.1;
  r.scheduler = "Linear";
  r.max_tokens = 512;
  return r;
}

StageRecipe StageRecipe::desk(int stage) {
  StageRecipe r = paper(stage);
  // The toy model needs many passes over small data and a higher rate.
  switch (stage) {
    case 1: r.lr = 3e-3; r.batch_size = 16; r.steps = 500; break;
    case 2: r.lr = 5e-3; r.batch_size = 8; r.steps = 400; break;
    case 3:
      // Full-weight alignment terms swamp the token loss at this scale.
      r.lr = 6e-3; r.batch_size = 4; r.steps = 700;
      r.weights.align = 0.1; r.weights.denoise = 0.1;
      break;
  }
  return r;
}

int StageRecipe::total_steps(std::size_t examples) const {
  if (steps > 0) return steps;
  if (examples == 0) throw Error(ErrorKind::kEmptyBatch, "no training examples");
  const auto per_epoch = (examples + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  return static_cast<int>(per_epoch) * epochs;
}

nlohmann::json StageRecipe::to_json() const {
  return {{"stage", stage},
          {"optimizer", optimizer},
          {"learning_rate", lr},
          {"weight_decay", weight_decay},
          {"epochs", epochs},
          {"warmup_ratio", warmup_ratio},
          {"scheduler", scheduler},
          {"batch_size", batch_size},
          {"max_tokens", max_tokens},
          {"unfreeze_llm", unfreeze_llm},
          {"steps", steps},
          {"loss_weights", {{"nll", weights.nll}, {"align", weights.align}, {"denoise", weights.denoise}}},
          {"stage3_align", stage3_align},
          {"stage3_denoise", stage3_denoise},
          {"denoise_draws", denoise_draws}};
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"total", total}, {"ce_text", ce_text}, {"nll_signal", nll_signal}, {"align_l2", align_l2}, {"denoise", denoise}};
}

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j = {{"stage", stage}, {"step", step}, {"lr", lr}};
  j["components"] = loss.to_json();
  j["total"] = loss.total;
  return j;
}

double lr_at(int step, int total_steps, double warmup_ratio, double peak) {
  if (total_steps <= 0) return 0.0;
  const int warmup = static_cast<int>(std::ceil(warmup_ratio * total_steps));
  if (step < warmup) return peak * step / std::max(1, warmup);
  return peak * std::max(0, total_steps - step) / static_cast<double>(std::max(1, total_steps - warmup));
}

// --- optimizer ------------------------------------------------------------------

Adam::Adam(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

void Adam::step(ParamStore& store, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (const auto& p : store.params()) {
    if (!p.var.requires_grad() || p.grad().size() == 0) continue;
    Mat& value = p.mutable_value();
    const Mat g = p.grad() + wd_ * value;
    auto [it, fresh] = moments_.try_emplace(p.name, Mat::Zero(g.rows(), g.cols()), Mat::Zero(g.rows(), g.cols()));
    Mat& m = it->second.first;
    Mat& v = it->second.second;
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    // Keep parameters float32-representable so checkpoints are exact.
    value = round_to_float32(value);
  }
}

// --- losses ---------------------------------------------------------------------

namespace {

Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) return ag::constant(Mat::Zero(1, 1));
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = ag::add(acc, xs[i]);
  return ag::scale(acc, 1.0 / static_cast<double>(xs.size()));
}

StepLoss combine(const Var& ce, const Var& nll, const Var& align, const Var& denoise, const LossWeights& w) {
  StepLoss out;
  out.total = ag::add(ag::add(ce, ag::scale(nll, w.nll)), ag::add(ag::scale(align, w.align), ag::scale(denoise, w.denoise)));
  out.parts.ce_text = ce.item();
  out.parts.nll_signal = nll.item();
  out.parts.align_l2 = align.item();
  out.parts.denoise = denoise.item();
  out.parts.total = out.total.item();
  if (!std::isfinite(out.parts.total)) throw Error(ErrorKind::kNumeric, "training loss is not finite");
  return out;
}

Var zero() { return ag::constant(Mat::Zero(1, 1)); }

// Splits targets into text and signal parts.
std::pair<std::vector<int>, std::vector<int>> split_targets(const std::vector<int>& targets,
                                                            const SignalVocabulary& vocab) {
  std::vector<int> text(targets.size(), -1);
  std::vector<int> signal(targets.size(), -1);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    (vocab.is_signal(targets[i]) ? signal : text)[i] = targets[i];
  }
  return {text, signal};
}

bool any_active(const std::vector<int>& t) {
  return std::any_of(t.begin(), t.end(), [](int v) { return v >= 0; });
}

struct GenerationTerms {
  std::vector<Var> align;
  std::vector<Var> denoise;
};

void generation_terms(const Model& model, const Var& hidden, const SignalSpan& span, Mode mode, Rng& rng,
                      bool align, bool denoise, int draws, GenerationTerms& out) {
  if (!align && !denoise) return;
  const Var states = ag::slice_rows(hidden, span.start, span.length);
  const ConditionEmbedding proj = model.outproj().project_signal(states, span.modality, mode, &rng);
  if (align) {
    const ConditionEmbedding target = model.conditioner().encode(span.target->caption, span.modality);
    out.align.push_back(caption_align_loss(proj.values, target.values));
  }
  if (denoise) {
    out.denoise.push_back(model.diffusion().denoise_loss(span.modality, span.target->latent_row(), proj.values, rng, draws));
  }
}

}  // namespace

StepLoss stage1_loss(const Model& model, std::span<const CaptionPair* const> batch, Mode mode, Rng& rng) {
  if (batch.empty()) throw Error(ErrorKind::kEmptyBatch, "stage 1 batch is empty");
  const StageOptions opt{.mode = mode, .rng = &rng};
  std::vector<Var> ce;
  for (const CaptionPair* p : batch) {
    const BuiltSequence seq = captioning_sequence(model, *p, opt);
    const LlmOutput out = model.llm().forward(seq.input);
    ce.push_back(ag::cross_entropy(out.logits, seq.targets));
  }
  return combine(mean_of(ce), zero(), zero(), zero(), LossWeights{});
}

StepLoss stage2_loss(const Model& model, std::span<const CaptionPair* const> batch, const StageRecipe& recipe,
                     Mode mode, Rng& rng) {
  if (batch.empty()) throw Error(ErrorKind::kEmptyBatch, "stage 2 batch is empty");
  std::vector<Var> nll;
  GenerationTerms gen;
  for (const CaptionPair* p : batch) {
    if (p->modality == Modality::kText) throw Error(ErrorKind::kWrongModality, "text has no decoder to align");
    const BuiltSequence seq = signal_sequence(model, *p);
    const LlmOutput out = model.llm().forward(seq.input);
    nll.push_back(ag::cross_entropy(out.logits, seq.targets));
    generation_terms(model, out.hidden, seq.spans.front(), mode, rng, true, true, recipe.denoise_draws, gen);
  }
  return combine(zero(), mean_of(nll), mean_of(gen.align), mean_of(gen.denoise), recipe.weights);
}

StepLoss stage3_loss(const Model& model, std::span<const Dialogue* const> batch, const StageRecipe& recipe,
                     Mode mode, Rng& rng) {
  if (batch.empty()) throw Error(ErrorKind::kEmptyBatch, "stage 3 batch is empty");
  const StageOptions opt{.mode = mode, .rng = &rng};
  std::vector<Var> ce;
  std::vector<Var> nll;
  GenerationTerms gen;
  for (const Dialogue* d : batch) {
    const BuiltSequence seq = dialogue_sequence(model, *d, opt);
    const LlmOutput out = model.llm().forward(seq.input);
    const auto [text, signal] = split_targets(seq.targets, model.llm().vocab());
    if (any_active(text)) ce.push_back(ag::cross_entropy(out.logits, text));
    if (any_active(signal)) nll.push_back(ag::cross_entropy(out.logits, signal));
    for (const SignalSpan& span : seq.spans) {
      generation_terms(model, out.hidden, span, mode, rng, recipe.stage3_align, recipe.stage3_denoise,
                       recipe.denoise_draws, gen);
    }
  }
  return combine(mean_of(ce), mean_of(nll), mean_of(gen.align), mean_of(gen.denoise), recipe.weights);
}

// --- stage driver ----------------------------------------------------------------

void apply_mask(Model& model, int stage) { model.store().set_trainable(trainable_mask(stage, model.store())); }

void check_prerequisites(const Model& model, int stage) {
  std::vector<std::string> need;
  switch (stage) {
    case 1: need = {kStepLlmPretrain}; break;
    case 2: need = {kStepLlmPretrain, kStepStage1, kStepDiffusionPretrain}; break;
    case 3: need = {kStepLlmPretrain, kStepStage1, kStepDiffusionPretrain, kStepStage2}; break;
    default: throw Error(ErrorKind::kInvalidParameter, "unknown training stage " + std::to_string(stage));
  }
  for (const auto& step : need) {
    if (!model.has(step)) {
      throw Error(ErrorKind::kDependency, "stage " + std::to_string(stage) + " needs a checkpoint that completed \"" +
                                              step + "\"; run that step first");
    }
  }
}

namespace {

// Epoch-shuffled minibatches of indices.
class Batcher {
 public:
  Batcher(std::size_t n, int batch, Rng& rng) : order_(n), batch_(static_cast<std::size_t>(batch)), rng_(&rng) {
    if (n == 0) throw Error(ErrorKind::kEmptyBatch, "no training examples");
    if (batch < 1) throw Error(ErrorKind::kInvalidParameter, "batch size must be >= 1");
    std::iota(order_.begin(), order_.end(), 0);
    shuffle();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < std::min(batch_, order_.size())) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_->below(static_cast<int>(i)))]);
    }
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  Rng* rng_;
  std::size_t pos_ = 0;
};

template <class LossFn>
StageResult optimize(Model& model, int stage, int total, double peak_lr, double warmup, double wd, Batcher& batcher,
                     Rng& rng, const MetricsSink& sink, LossFn&& loss_fn) {
  Adam adam(0.9, 0.999, 1e-8, wd);
  StageResult res;
  for (int step = 0; step < total; ++step) {
    const auto batch = batcher.next();
    StepLoss loss = loss_fn(batch, rng);
    model.store().zero_grad();
    loss.total.backward();
    const double lr = lr_at(step, total, warmup, peak_lr);
    adam.step(model.store(), lr);
    res.last = loss.parts;
    res.steps = step + 1;
    if (sink) sink(StepRecord{stage, step, lr, loss.parts});
  }
  model.store().zero_grad();
  return res;
}

template <class T>
std::vector<const T*> pick(std::span<const T> items, const std::vector<std::size_t>& idx) {
  std::vector<const T*> out;
  for (auto i : idx) out.push_back(&items[i]);
  return out;
}

}  // namespace

StageResult train_stage1(Model& model, std::span<const CaptionPair> pairs, const StageRecipe& recipe, Rng& rng,
                         const MetricsSink& sink) {
  check_prerequisites(model, 1);
  apply_mask(model, 1);
  Batcher batcher(pairs.size(), recipe.batch_size, rng);
  auto res = optimize(model, 1, recipe.total_steps(pairs.size()), recipe.lr, recipe.warmup_ratio, recipe.weight_decay,
                      batcher, rng, sink, [&](const std::vector<std::size_t>& idx, Rng& r) {
                        return stage1_loss(model, pick(pairs, idx), Mode::kTrain, r);
                      });
  model.mark(kStepStage1);
  return res;
}

StageResult train_stage2(Model& model, std::span<const CaptionPair> pairs, const StageRecipe& recipe, Rng& rng,
                         const MetricsSink& sink) {
  check_prerequisites(model, 2);
  apply_mask(model, 2);
  Batcher batcher(pairs.size(), recipe.batch_size, rng);
  auto res = optimize(model, 2, recipe.total_steps(pairs.size()), recipe.lr, recipe.warmup_ratio, recipe.weight_decay,
                      batcher, rng, sink, [&](const std::vector<std::size_t>& idx, Rng& r) {
                        return stage2_loss(model, pick(pairs, idx), recipe, Mode::kTrain, r);
                      });
  model.mark(kStepStage2);
  return res;
}

StageResult train_stage3(Model& model, std::span<const Dialogue> dialogues, const StageRecipe& recipe, Rng& rng,
                         const MetricsSink& sink) {
  check_prerequisites(model, 3);
  apply_mask(model, 3);
  Batcher batcher(dialogues.size(), recipe.batch_size, rng);
  auto res = optimize(model, 3, recipe.total_steps(dialogues.size()), recipe.lr, recipe.warmup_ratio,
                      recipe.weight_decay, batcher, rng, sink, [&](const std::vector<std::size_t>& idx, Rng& r) {
                        return stage3_loss(model, pick(dialogues, idx), recipe, Mode::kTrain, r);
                      });
  model.mark(kStepStage3);
  return res;
}

StageResult run_stage(int stage, const StageRecipe& recipe, const Dataset& ds, Model& model, Rng& rng,
                      const MetricsSink& sink) {
  if (recipe.stage != stage) throw Error(ErrorKind::kInvalidParameter, "recipe is for another stage");
  switch (stage) {
    case 1: return train_stage1(model, ds.pairs, recipe, rng, sink);
    case 2: return train_stage2(model, ds.pairs, recipe, rng, sink);
    case 3: {
      std::vector<Dialogue> all = ds.t2m;
      all.insert(all.end(), ds.mosit.begin(), ds.mosit.end());
      return train_stage3(model, all, recipe, rng, sink);
    }
    default: throw Error(ErrorKind::kInvalidParameter, "unknown training stage " + std::to_string(stage));
  }
}

// --- pretraining -----------------------------------------------------------------

void seed_signal_rows(Model& model) {
  ParamStore& store = model.store();
  const Mat filler = store.value("llm.base.tok_embed").row(kPadId);
  for (Modality m : kGeneratedModalities) {
    Mat& e = store.at("outproj." + std::string(to_string(m)) + ".signal_embed").mutable_value();
    e = round_to_float32(Mat((0.2 * e).rowwise() + filler.row(0)));
  }
}

StageResult pretrain_llm(Model& model, const std::vector<TokenSequence>& texts, const PretrainOptions& opt, Rng& rng,
                         const MetricsSink& sink) {
  model.store().set_trainable([](const std::string& n) { return n.rfind("llm.base.", 0) == 0; });
  Batcher batcher(texts.size(), opt.batch_size, rng);
  auto res = optimize(model, 0, opt.steps, opt.lr, 0.1, 0.0, batcher, rng, sink,
                      [&](const std::vector<std::size_t>& idx, Rng&) {
                        std::vector<Var> ce;
                        for (auto i : idx) {
                          const TokenSequence& ids = texts[i];
                          MixedInput in;
                          in.add_tokens(ids);
                          std::vector<int> targets(ids.begin() + 1, ids.end());
                          targets.push_back(-1);
                          ce.push_back(ag::cross_entropy(model.llm().forward(in, false).logits, targets));
                        }
                        return combine(mean_of(ce), zero(), zero(), zero(), LossWeights{});
                      });
  model.store().set_trainable([](const std::string&) { return false; });
  // Concept rows start at the pad embedding too, through the bias.
  seed_signal_rows(model);
  const Mat filler = model.store().value("llm.base.tok_embed").row(kPadId);
  for (const char* bias : {"grouping.out.b", "grouping.linear.b"}) {
    if (model.store().contains(bias)) model.store().at(bias).mutable_value() = round_to_float32(filler);
  }
  model.mark(kStepLlmPretrain);
  return res;
}

StageResult pretrain_diffusion(Model& model, const PretrainOptions& opt, Rng& rng, const MetricsSink& sink) {
  StageResult res;
  for (Modality m : kGeneratedModalities) {
    const std::string prefix = "diffusion." + std::string(to_string(m)) + ".";
    model.store().set_trainable([&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
    std::map<std::pair<int, int>, Mat> cond;  // (mode, attribute) -> pooled conditioner row
    const int modes = static_cast<int>(mode_names(m).size());
    const int attrs = static_cast<int>(attribute_names(m).size());
    for (int a = 0; a < modes; ++a) {
      for (int b = 0; b < attrs; ++b) {
        cond[{a, b}] = model.conditioner().encode(describe(m, a, b), m).values.value().colwise().mean();
      }
    }
    const int dim = latent_dim(m);
    const int dc = model.config().diffusion.cond_dim;
    Batcher unused(1, 1, rng);
    auto r = optimize(model, 0, opt.steps, opt.lr, 0.1, 0.0, unused, rng, sink,
                      [&](const std::vector<std::size_t>&, Rng& g) {
                        Mat x0(opt.batch_size, dim);
                        Mat c(opt.batch_size, dc);
                        for (int i = 0; i < opt.batch_size; ++i) {
                          const int mode = g.below(modes);
                          const int attr = g.below(attrs);
                          const auto centre = mode_center(m, mode);
                          for (int j = 0; j < dim; ++j) x0(i, j) = centre[static_cast<std::size_t>(j)] + kModeStd * g.normal();
                          c.row(i) = cond.at({mode, attr});
                        }
                        Var loss = model.diffusion().denoise_loss_pooled(m, x0, ag::constant(c), g);
                        return combine(zero(), zero(), zero(), loss, LossWeights{});
                      });
    res.steps += r.steps;
    res.last = r.last;
  }
  model.store().set_trainable([](const std::string&) { return false; });
  model.mark(kStepDiffusionPretrain);
  return res;
}

// --- evaluation ------------------------------------------------------------------

double caption_ce(const Model& model, std::span<const CaptionPair> pairs) {
  ag::NoGradGuard no_grad;
  const StageOptions opt{.mode = Mode::kEval};
  double total = 0;
  double count = 0;
  for (const auto& p : pairs) {
    const BuiltSequence seq = captioning_sequence(model, p, opt);
    const double n = static_cast<double>(std::count_if(seq.targets.begin(), seq.targets.end(), [](int t) { return t >= 0; }));
    total += ag::cross_entropy(model.llm().forward(seq.input).logits, seq.targets).item() * n;
    count += n;
  }
  return count > 0 ? total / count : 0.0;
}

AlignmentEval evaluate_alignment(const Model& model, std::span<const CaptionPair> pairs) {
  ag::NoGradGuard no_grad;
  AlignmentEval ev;
  int correct = 0;
  int total = 0;
  for (const auto& p : pairs) {
    const BuiltSequence seq = signal_sequence(model, p);
    const LlmOutput out = model.llm().forward(seq.input);
    for (std::size_t i = 0; i < seq.targets.size(); ++i) {
      if (seq.targets[i] < 0) continue;
      Eigen::Index best = 0;
      out.logits.value().row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
      correct += static_cast<int>(best) == seq.targets[i];
      ++total;
    }
    const SignalSpan& span = seq.spans.front();
    const Var states = ag::slice_rows(out.hidden, span.start, span.length);
    const Mat proj = model.outproj().project_signal(states, p.modality, Mode::kEval).values.value();
    const Mat target = model.conditioner().encode(p.caption, p.modality).values.value();
    ev.mean_cosine += mean_row_cosine(proj, target);
    ev.align_l2 += caption_align_loss(ag::constant(proj), ag::constant(target)).item();
  }
  if (!pairs.empty()) {
    ev.mean_cosine /= static_cast<double>(pairs.size());
    ev.align_l2 /= static_cast<double>(pairs.size());
  }
  ev.signal_accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
  return ev;
}

DialogueEval evaluate_dialogues(const Model& model, std::span<const Dialogue> dialogues, int max_new) {
  const StageOptions opt{.mode = Mode::kEval};
  const SignalVocabulary& vocab = model.llm().vocab();
  DialogueEval ev;
  int emit_ok = 0;
  int act_ok = 0;
  int text_ok = 0;
  for (const auto& d : dialogues) {
    for (std::size_t i = 1; i < d.messages.size(); i += 2) {
      BuiltSequence prefix;
      {
        ag::NoGradGuard no_grad;
        prefix = dialogue_prefix(model, d, i, opt);
      }
      const Generation gen = model.llm().generate(prefix.input, GenerateOptions{.max_new = max_new});
      TokenSequence gold_signals;
      std::set<Modality> gold_active;
      for (const auto& a : d.messages[i].attachments) {
        const TokenSequence run = vocab.run(a.modality);
        gold_signals.insert(gold_signals.end(), run.begin(), run.end());
        gold_active.insert(a.modality);
      }
      TokenSequence emitted;
      for (int id : gen.ids) {
        if (vocab.is_signal(id)) emitted.push_back(id);
      }
      const RoutingDecision decision = parse_stream(GeneratedStream{gen.ids, Mat()}, vocab);
      emit_ok += emitted == gold_signals;
      act_ok += decision.activated == gold_active;
      text_ok += decision.text == d.messages[i].text;
      ++ev.machine_turns;
    }
  }
  if (ev.machine_turns > 0) {
    ev.emission_accuracy = static_cast<double>(emit_ok) / ev.machine_turns;
    ev.activation_match = static_cast<double>(act_ok) / ev.machine_turns;
    ev.text_exact = static_cast<double>(text_ok) / ev.machine_turns;
  }
  return ev;
}

// --- gradient checking -----------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

struct Coordinate {
  Var leaf;
  Eigen::Index index;
};

std::vector<Coordinate> sample_coordinates(const std::vector<Var>& leaves, int count, Rng& rng) {
  std::vector<std::pair<std::size_t, Eigen::Index>> flat;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (Eigen::Index j = 0; j < leaves[i].value().size(); ++j) flat.emplace_back(i, j);
  }
  const std::size_t n = std::min(flat.size(), static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(flat[i], flat[i + static_cast<std::size_t>(rng.below(static_cast<int>(flat.size() - i)))]);
  }
  std::vector<Coordinate> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({leaves[flat[i].first], flat[i].second});
  return out;
}

}  // namespace

GradCheckReport grad_check(const std::string& selector, std::uint64_t seed, int coordinates, double h,
                           bool corrupt_gradient) {
  ModelConfig cfg;
  cfg.seed = seed;
  Model model(cfg);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Var> leaves;
  std::function<Var()> loss_fn;

  const auto params_with = [&](const std::string& prefix, const std::vector<std::string>& skip) {
    model.store().set_trainable([&](const std::string& n) {
      if (n.rfind(prefix, 0) != 0) return false;
      return std::none_of(skip.begin(), skip.end(), [&](const std::string& s) { return n.find(s) != std::string::npos; });
    });
    for (const auto& p : model.store().params()) {
      if (p.var.requires_grad()) leaves.push_back(p.var);
    }
  };
  const auto random = [&](Eigen::Index r, Eigen::Index c, double scale) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
  };

  AssignmentReplay replay;
  if (selector == "grouping") {
    params_with("grouping.", {});
    const Mat features = random(model.encoders().token_count(Modality::kImage), cfg.feature_dim, 1.0);
    const Mat weights = random(cfg.grouping.stage_sizes.back(), cfg.llm.dim, 1.0);
    Rng noise(seed + 1);
    const StageOptions opt{.mode = Mode::kTrain, .rng = &noise, .replay = &replay};
    loss_fn = [&, opt, features, weights] {
      const GroupingOutput out = model.grouping().project(ag::constant(features), Modality::kImage, opt);
      return ag::sum(ag::mul(model.grouping().to_llm(out), ag::constant(weights)));
    };
    loss_fn();  // records the discrete assignment
    replay.action = AssignmentReplay::Action::kReplay;
  } else if (selector == "outproj") {
    params_with("outproj.image.", {"signal_embed", "signal_head"});
    const Var states = ag::constant(random(cfg.signal_count(Modality::kImage), cfg.llm.dim, 1.0));
    const Var target = ag::constant(random(cfg.outproj.queries, cfg.diffusion.cond_dim, 0.5));
    loss_fn = [&, states, target] {
      Rng dropout_rng(seed + 2);  // same mask for every evaluation
      const ConditionEmbedding c = model.outproj().project_signal(states, Modality::kImage, Mode::kTrain, &dropout_rng);
      return caption_align_loss(c.values, target);
    };
  } else if (selector == "denoise-cond") {
    model.store().set_trainable([](const std::string&) { return false; });
    const Var cond = ag::leaf(random(cfg.outproj.queries, cfg.diffusion.cond_dim, 0.5), true);
    leaves.push_back(cond);
    const Mat x0 = random(1, latent_dim(Modality::kImage), 1.0);
    loss_fn = [&, cond, x0] {
      Rng draw(seed + 3);  // same timesteps and noise for every evaluation
      return model.diffusion().denoise_loss(Modality::kImage, x0, cond, draw, 8);
    };
  } else {
    throw Error(ErrorKind::kInvalidParameter, "unknown gradient-check selector \"" + selector + "\"");
  }

  Var loss = loss_fn();
  loss.backward();
  GradCheckReport report;
  report.selector = selector;
  ag::NoGradGuard no_grad;
  for (const Coordinate& c : sample_coordinates(leaves, coordinates, rng)) {
    Mat& v = c.leaf.node()->value;
    const double old = v.data()[c.index];
    v.data()[c.index] = old + h;
    const double up = loss_fn().item();
    v.data()[c.index] = old - h;
    const double down = loss_fn().item();
    v.data()[c.index] = old;
    const double numeric = (up - down) / (2 * h);
    double analytic = c.leaf.grad().size() ? c.leaf.grad().data()[c.index] : 0.0;
    if (corrupt_gradient) analytic = 1.5 * analytic + 0.01;
    report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic, numeric));
    report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic - numeric));
    ++report.coordinates;
  }
  return report;
}

}  // namespace nxgpt
