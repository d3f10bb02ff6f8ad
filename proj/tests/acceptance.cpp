// End-to-end acceptance runner: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nxgpt/config.hpp"
#include "nxgpt/data.hpp"
#include "nxgpt/grouping.hpp"
#include "nxgpt/llm.hpp"
#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/routing.hpp"
#include "nxgpt/sequence.hpp"
#include "nxgpt/training.hpp"
#include "protocol_util.hpp"

using namespace nxgpt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::map<std::string, Mat> snapshot(const Model& m) {
  std::map<std::string, Mat> out;
  for (const auto& p : m.store().params()) out[p.name] = p.value();
  return out;
}

bool same_bytes(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Byte-identical directory trees.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::set<fs::path> names;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) names.insert(fs::relative(e.path(), a));
  }
  std::size_t other = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other += e.is_regular_file();
  if (other != names.size()) {
    why = "file counts differ";
    return false;
  }
  for (const auto& n : names) {
    if (!fs::exists(b / n) || slurp(a / n) != slurp(b / n)) {
      why = "differs: " + n.string();
      return false;
    }
  }
  return true;
}

int shell(const std::string& cmd) { return std::system(cmd.c_str()); }

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

// Shared fixture: the generated dataset and a checkpoint with pretrained
// frozen backbones.
struct Fixture {
  fs::path work;
  fs::path cli;
  Dataset ds;
  std::vector<CaptionPair> pairs32;  // 32 pairs interleaving the modalities
  fs::path base;

  void build() {
    ds = generate_dataset(7, 32, 64);
    for (int i = 0; i < 32; ++i) pairs32.push_back(ds.pairs[static_cast<std::size_t>((i % 3) * 32 + i / 3)]);
    base = work / "base";
    const auto t0 = Clock::now();
    Model model{ModelConfig{}};
    Rng rng(1);
    PretrainOptions po;
    po.steps = 600;
    pretrain_llm(model, pretraining_texts(model, ds), po, rng);
    po.steps = 400;
    po.batch_size = 32;
    pretrain_diffusion(model, po, rng);
    model.save(base);
    std::cout << "fixture: pretrained backbones in "
              << num(std::chrono::duration<double>(Clock::now() - t0).count(), 3) << " s\n"
              << std::flush;
  }
};

Fixture fx;

// --- 1 ---------------------------------------------------------------------

Outcome param_budget_ratio() {
  const ParamBudget b = param_budget(paper_scale_entries());
  return {std::abs(b.ratio - 0.01247) <= 1e-4, "ratio " + num(b.ratio, 6)};
}

// --- 2 ---------------------------------------------------------------------

// Directional derivative of every entry of f(x) along v, by one backward
// pass per entry on a freshly built graph.
Mat jvp(const std::function<Var(const Var&)>& f, const Mat& x, const Mat& v) {
  const Mat probe = f(ag::constant(x)).value();
  Mat out(probe.rows(), probe.cols());
  for (Eigen::Index i = 0; i < probe.rows(); ++i) {
    for (Eigen::Index j = 0; j < probe.cols(); ++j) {
      const Var leaf = ag::leaf(x);
      const Var y = f(leaf);
      Mat seed = Mat::Zero(y.rows(), y.cols());
      seed(i, j) = 1.0;
      y.backward(seed);
      out(i, j) = leaf.grad().size() ? (leaf.grad().array() * v.array()).sum() : 0.0;
    }
  }
  return out;
}

Outcome straight_through_jvp() {
  Rng rng(21);
  double worst = 0;
  bool onehot = true;

  // Raw assignment on random concepts and inputs with Gumbel noise.
  const Mat concepts = Mat::NullaryExpr(6, 16, [&] { return rng.normal(); });
  const Mat inputs = Mat::NullaryExpr(20, 16, [&] { return rng.normal(); });
  const Mat noise = sample_gumbel(6, 20, rng);
  const Var tau = ag::constant(Mat::Constant(1, 1, 0.7));
  const Mat v = Mat::NullaryExpr(20, 16, [&] { return rng.normal(); });
  const auto soft = [&](const Var& x) { return soft_assignment(ag::constant(concepts), x, tau, noise); };
  const auto hard = [&](const Var& x) { return straight_through(soft(x)); };
  {
    const Mat a = soft(ag::constant(inputs)).value();
    const Mat h = hard(ag::constant(inputs)).value();
    onehot &= (h.array() == column_onehot(a).array()).all();
    worst = std::max(worst, (jvp(soft, inputs, v) - jvp(hard, inputs, v)).cwiseAbs().maxCoeff());
  }

  // Both stages of the pretrained projector on a real encoded image.
  const auto model = Model::load(fx.base);
  const Mat feats = model->encoders().encode(fx.pairs32[0].payload).features;
  const Mat dir = Mat::NullaryExpr(feats.rows(), feats.cols(), [&] { return rng.normal(); });
  for (int stage = 0; stage < 2; ++stage) {
    const auto run = [&](const Var& x, bool st) {
      StageOptions opt;
      const auto out = model->grouping().project(x, Modality::kImage, opt);
      const auto& s = out.stages[static_cast<std::size_t>(stage)];
      return st ? s.hard_assignment : s.assignment;
    };
    const Mat a = run(ag::constant(feats), false).value();
    const Mat h = run(ag::constant(feats), true).value();
    onehot &= (h.array() == column_onehot(a).array()).all();
    const Mat ja = jvp([&](const Var& x) { return run(x, false); }, feats, dir);
    const Mat jh = jvp([&](const Var& x) { return run(x, true); }, feats, dir);
    worst = std::max(worst, (ja - jh).cwiseAbs().maxCoeff());
  }
  return {onehot && worst <= 1e-6,
          std::string("forward one-hot ") + (onehot ? "yes" : "no") + ", max JVP gap " + num(worst, 3)};
}

// --- 3 ---------------------------------------------------------------------

Outcome grad_checks() {
  bool ok = true;
  std::string detail;
  for (const char* sel : {"grouping", "outproj", "denoise-cond"}) {
    const auto r = grad_check(sel, 42, 100);
    ok &= r.coordinates >= 100 && r.max_rel_error < 1e-4;
    detail += std::string(detail.empty() ? "" : ", ") + sel + " " + num(r.max_rel_error, 3) + " over " +
              std::to_string(r.coordinates);
  }
  return {ok, detail};
}

// --- 4 ---------------------------------------------------------------------

Outcome freezing() {
  auto model = Model::load(fx.base);
  const auto at_start = snapshot(*model);
  bool ok = true;
  std::string detail;
  for (int stage = 1; stage <= 3; ++stage) {
    const auto before = snapshot(*model);
    StageRecipe r = StageRecipe::desk(stage);
    r.steps = 10;
    Rng rng(30 + static_cast<std::uint64_t>(stage));
    if (stage == 1) train_stage1(*model, fx.ds.pairs, r, rng);
    if (stage == 2) train_stage2(*model, fx.ds.pairs, r, rng);
    if (stage == 3) train_stage3(*model, fx.ds.mosit, r, rng);
    const auto mask = trainable_mask(stage, model->store());
    const std::set<std::string> allowed(mask.begin(), mask.end());
    int changed_outside = 0, moved_inside = 0;
    for (const auto& p : model->store().params()) {
      const bool same = same_bytes(p.value(), before.at(p.name));
      if (allowed.count(p.name)) {
        moved_inside += !same;
      } else if (!same) {
        ++changed_outside;
      }
    }
    ok &= changed_outside == 0 && moved_inside > 0;
    detail += (detail.empty() ? "" : "; ") + std::string("stage ") + std::to_string(stage) + ": " +
              std::to_string(changed_outside) + " frozen changed, " + std::to_string(moved_inside) + " trained moved";
  }
  int base_changed = 0;
  for (const auto& p : model->store().params()) {
    if (p.name.rfind("llm.base.", 0) == 0) base_changed += !same_bytes(p.value(), at_start.at(p.name));
  }
  ok &= base_changed == 0;
  return {ok, detail + "; llm.base changed " + std::to_string(base_changed)};
}

// --- 5, 6 ------------------------------------------------------------------

Outcome stage1_caption_ce() {
  auto model = Model::load(fx.base);
  const StageRecipe r = StageRecipe::desk(1);
  Rng rng(2);
  const auto res = train_stage1(*model, fx.pairs32, r, rng);
  const double ce = caption_ce(*model, fx.pairs32);
  model->save(fx.work / "stage1_32");
  return {ce < 0.1 && res.steps <= 500, "caption CE " + num(ce) + " after " + std::to_string(res.steps) + " steps"};
}

Outcome stage2_alignment() {
  if (!fs::exists(fx.work / "stage1_32" / "manifest.json")) return {false, "stage-1 checkpoint missing"};
  auto model = Model::load(fx.work / "stage1_32");
  Rng rng(3);
  train_stage2(*model, fx.pairs32, StageRecipe::desk(2), rng);
  const AlignmentEval ev = evaluate_alignment(*model, fx.pairs32);
  return {ev.mean_cosine > 0.9 && ev.signal_accuracy == 1.0,
          "mean cosine " + num(ev.mean_cosine) + ", signal accuracy " + num(ev.signal_accuracy)};
}

// --- 7 ---------------------------------------------------------------------

// Stages 1 and 2 on every pair give the starting point for instruction tuning.
fs::path stage3_start() {
  const fs::path dir = fx.work / "stage2_all";
  auto model = Model::load(fx.base);
  Rng rng(2);
  train_stage1(*model, fx.ds.pairs, StageRecipe::desk(1), rng);
  train_stage2(*model, fx.ds.pairs, StageRecipe::desk(2), rng);
  model->save(dir);
  return dir;
}

Outcome instruction_following(const fs::path& start) {
  auto model = Model::load(start);
  Rng rng(3);
  const auto t0 = Clock::now();
  train_stage3(*model, fx.ds.mosit, StageRecipe::desk(3), rng);
  const double train_s = std::chrono::duration<double>(Clock::now() - t0).count();
  const DialogueEval ev = evaluate_dialogues(*model, fx.ds.mosit);

  // Decoders run for exactly the activated modalities.
  int prompts = 0, exact = 0, activations = 0;
  Rng irng(4);
  for (const auto& d : fx.ds.mosit) {
    InferenceRequest req;
    req.prompt = d.messages[0].text;
    for (const auto& a : d.messages[0].attachments) req.attachments.push_back(a.payload);
    const auto res = run_inference(*model, req, irng);
    bool match = true;
    for (Modality m : kGeneratedModalities) {
      const int want = res.decision.active(m) ? 1 : 0;
      match &= res.decoder_calls.at(m) == want;
      match &= static_cast<int>(res.outputs.count(m)) == want;
    }
    activations += static_cast<int>(res.decision.activated.size());
    exact += match;
    ++prompts;
  }
  const bool ok = ev.emission_accuracy >= 0.95 && ev.activation_match >= 0.95 && exact == prompts;
  return {ok, "emission " + num(ev.emission_accuracy) + ", activation " + num(ev.activation_match) + " over " +
                  std::to_string(ev.machine_turns) + " turns; decoder calls exact on " + std::to_string(exact) +
                  "/" + std::to_string(prompts) + " prompts (" + std::to_string(activations) +
                  " activations); training " + num(train_s, 4) + " s"};
}

// --- 8 ---------------------------------------------------------------------

Outcome conditional_diffusion() {
  const auto model = Model::load(fx.base);
  Rng rng(8);
  bool ok = true;
  std::string detail;
  for (Modality m : kGeneratedModalities) {
    const int modes = static_cast<int>(mode_names(m).size());
    int hit = 0, n = 0;
    for (int k = 0; k < modes; ++k) {
      const int count = 500 / modes + (k < 500 % modes ? 1 : 0);
      const Mat cond = model->conditioner().encode(describe(m, k, 0), m).values.value();
      for (const auto& s : model->diffusion().sample(m, cond, rng, count)) {
        const std::vector<double> latent(s.values.data(), s.values.data() + s.values.size());
        hit += nearest_mode(m, latent) == k;
        ++n;
      }
    }
    const double frac = static_cast<double>(hit) / n;
    ok &= frac >= 0.9;
    detail += (detail.empty() ? "" : ", ") + std::string(to_string(m)) + " " + num(frac) + " of " + std::to_string(n);
  }
  return {ok, detail};
}

// --- 9 ---------------------------------------------------------------------

Outcome protocol_round_trips() {
  const SignalVocabulary vocab{ModelConfig{}};
  Rng rng(9);
  int exact = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    RoutingDecision d;
    d.text = testing::random_text(rng, 16);
    for (Modality m : kGeneratedModalities) {
      if (rng.below(2)) d.activated.insert(m);
    }
    const auto back = parse_stream({testing::emit_stream(d, vocab, rng), {}}, vocab);
    exact += back.activated == d.activated && back.violations.empty();
  }
  int handled = 0;
  const auto fixtures = testing::malformed_fixtures(vocab);
  for (const auto& f : fixtures) {
    try {
      const auto d = parse_stream({f.ids, {}}, vocab);
      handled += !d.active(f.modality) && !d.violations.empty();
    } catch (...) {
    }
  }
  return {exact == trials && handled == static_cast<int>(fixtures.size()),
          std::to_string(exact) + "/" + std::to_string(trials) + " exact, " + std::to_string(handled) + "/" +
              std::to_string(fixtures.size()) + " malformed fixtures deactivated with a violation"};
}

// --- 10 --------------------------------------------------------------------

Outcome determinism() {
  const fs::path root = fx.work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::string why;
  bool ok = true;
  std::vector<std::string> hashes;
  for (int run = 0; run < 2; ++run) {
    const fs::path d = root / ("run" + std::to_string(run));
    const fs::path data = d / "data";
    const fs::path ckpt = d / "ckpt";
    const std::string log = quote(d.string() + ".log");
    fs::create_directories(d);
    ok &= shell(quote(fx.cli) + " gen-data --out " + quote(data) + " --seed 11 >" + log + " 2>&1") == 0;
    ok &= shell(quote(fx.cli) + " train --stage 1 --data " + quote(data) + " --out " + quote(ckpt) +
                " --seed 11 --pretrain-steps 60 --diffusion-steps 60 --steps 40 >>" + log + " 2>&1") == 0;
    if (!ok) return {false, "CLI run " + std::to_string(run) + " failed, see " + log};
    hashes.push_back(dataset_hash(data));
  }
  const bool data_same = hashes[0] == hashes[1] && same_tree(root / "run0/data", root / "run1/data", why);
  const bool ckpt_same = same_tree(root / "run0/ckpt", root / "run1/ckpt", why);
  return {data_same && ckpt_same, "dataset hash " + hashes[0] + (data_same ? " equal" : " differs") +
                                      ", checkpoint trees " + (ckpt_same ? "identical" : "differ (" + why + ")")};
}

// --- 11 --------------------------------------------------------------------

Outcome signal_sweep() {
  const fs::path root = fx.work / "sweep";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path data = root / "data";
  const fs::path out = root / "out";
  const std::string log = quote(root / "sweep.log");
  if (shell(quote(fx.cli) + " gen-data --out " + quote(data) + " --seed 5 >" + log + " 2>&1") != 0 ||
      shell(quote(fx.cli) + " sweep-signals --counts 1,4,8,16 --data " + quote(data) + " --out " + quote(out) +
            " --seed 5 >>" + log + " 2>&1") != 0) {
    return {false, "CLI failed, see " + log};
  }
  std::ifstream csv(out / "sweep.csv");
  std::string header, row;
  std::getline(csv, header);
  std::vector<int> counts;
  bool finite = true;
  std::size_t width = 0;
  {
    std::stringstream hs(header);
    std::string cell;
    while (std::getline(hs, cell, ',')) ++width;
  }
  bool well_formed = header.rfind("count,", 0) == 0 && width > 1;
  while (std::getline(csv, row)) {
    std::stringstream ss(row);
    std::string cell;
    std::size_t cells = 0;
    while (std::getline(ss, cell, ',')) {
      if (cells == 0) {
        counts.push_back(std::stoi(cell));
      } else {
        finite &= std::isfinite(std::stod(cell));
      }
      ++cells;
    }
    well_formed &= cells == width;
  }
  well_formed &= counts == std::vector<int>{1, 4, 8, 16} && fs::exists(out / "sweep.txt");
  return {well_formed && finite, std::to_string(counts.size()) + " rows x " + std::to_string(width) + " columns, " +
                                     (finite ? "all losses finite" : "non-finite loss")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance runner"};
  std::string work, cli;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory")->required();
  app.add_option("--cli", cli, "Path to the command-line binary")->required();
  app.add_option("--only", only, "Run a subset of criteria");
  CLI11_PARSE(app, argc, argv);

  fx.work = fs::absolute(work);
  fx.cli = fs::absolute(cli);
  fs::remove_all(fx.work);
  fs::create_directories(fx.work);
  fx.build();

  fs::path s3_start;
  const std::vector<Criterion> criteria = {
      {1, "param-budget ratio", 1, param_budget_ratio},
      {2, "straight-through estimator", 10, straight_through_jvp},
      {3, "gradient checks", 120, grad_checks},
      {4, "freezing per stage", 120, freezing},
      {5, "stage-1 caption CE", 300, stage1_caption_ce},
      {6, "stage-2 alignment", 300, stage2_alignment},
      {7, "stage-3 instruction following", 600, [&] { return instruction_following(s3_start); }},
      {8, "conditional diffusion", 180, conditional_diffusion},
      {9, "signal protocol round trips", 30, protocol_round_trips},
      {10, "determinism", 600, determinism},
      {11, "signal-count sweep", 1800, signal_sweep},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    if (c.id == 7) {
      const auto t0 = Clock::now();
      s3_start = stage3_start();
      std::cout << "fixture: stages 1-2 on all pairs in "
                << num(std::chrono::duration<double>(Clock::now() - t0).count(), 3) << " s\n";
    }
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  [" << std::setw(2) << c.id << "] " << c.name << ": " << o.detail
              << " (" << num(secs, 3) << " s of " << c.budget_s << " s" << (in_time ? "" : ", over budget") << ")\n"
              << std::flush;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
