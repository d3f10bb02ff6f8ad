#include "nxgpt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "nxgpt/checkpoint.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/data.hpp"
#include "nxgpt/error.hpp"
#include "nxgpt/model.hpp"
#include "nxgpt/rng.hpp"
#include "nxgpt/routing.hpp"
#include "nxgpt/sequence.hpp"
#include "nxgpt/training.hpp"

namespace fs = std::filesystem;

namespace nxgpt {

namespace {

constexpr std::uint64_t kDefaultSeed = 1234;

// Thrown for problems that must surface as exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("NXGPT_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw UsageError("NXGPT_SEED must be a non-negative integer, got \"" + std::string(env) + "\"");
    return v;
  }
  return kDefaultSeed;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw Error(ErrorKind::kIo, "cannot write " + p.string());
  return f;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(ErrorKind::kIo, "cannot create output directory " + dir.string());
}

// --- gen-data ----------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::optional<std::uint64_t> seed;
  int pairs = 32;
  int dialogues = 64;
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
  if (a.pairs < 1) throw UsageError("--pairs must be >= 1");
  if (a.dialogues < 1) throw UsageError("--dialogues must be >= 1");
  const std::uint64_t seed = resolve_seed(a.seed);
  const Dataset ds = generate_dataset(seed, a.pairs, a.dialogues);
  save_dataset(a.out, ds);
  out << "seed: " << seed << "\n"
      << "pairs: " << ds.pairs.size() << "  t2m: " << ds.t2m.size() << "  mosit: " << ds.mosit.size() << "\n"
      << "dataset hash: " << dataset_hash(a.out) << "\n";
  return kExitOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  int stage = 1;
  std::string data;
  std::string out;
  std::string resume;
  std::string config;
  bool paper_recipe = false;
  std::optional<std::uint64_t> seed;
  int steps = 0;
  int pretrain_steps = 600;
  int diffusion_steps = 400;
};

void print_header(std::ostream& out, const nlohmann::json& h, const StageRecipe& r) {
  out << "== train stage " << r.stage << (h.at("paper_recipe").get<bool>() ? " (paper recipe)" : " (desk recipe)")
      << " ==\n"
      << "seed            " << h.at("seed").get<std::uint64_t>() << "\n"
      << "config hash     " << h.at("config_hash").get<std::string>() << "\n"
      << "dataset hash    " << h.at("dataset_hash").get<std::string>() << "\n"
      << "optimizer       " << r.optimizer << "\n"
      << "learning rate   " << fmt(r.lr) << "\n"
      << "weight decay    " << fmt(r.weight_decay) << "\n"
      << "epochs          " << r.epochs << "\n"
      << "warmup ratio    " << fmt(r.warmup_ratio) << "\n"
      << "lr scheduler    " << r.scheduler << "\n"
      << "batch size      " << r.batch_size << "\n"
      << "max tokens      " << r.max_tokens << "\n"
      << "unfreeze LLM    " << (r.unfreeze_llm ? "✓" : "✗") << "\n"
      << "steps           " << h.at("steps").get<int>() << "\n";
}

int train(const TrainArgs& a, std::ostream& out) {
  if (a.steps < 0) throw UsageError("--steps must be >= 0");
  if (a.pretrain_steps < 1) throw UsageError("--pretrain-steps must be >= 1");
  if (a.diffusion_steps < 1) throw UsageError("--diffusion-steps must be >= 1");
  if (a.stage != 1 && a.resume.empty()) {
    throw Error(ErrorKind::kDependency, "stage " + std::to_string(a.stage) + " needs the checkpoint of stage " +
                                            std::to_string(a.stage - 1) + "; pass it with --resume");
  }
  if (!a.config.empty() && !a.resume.empty()) throw UsageError("--config only applies to a fresh model (no --resume)");
  const std::uint64_t seed = resolve_seed(a.seed);

  std::unique_ptr<Model> model;
  if (!a.resume.empty()) {
    model = Model::load(a.resume);
  } else {
    ModelConfig cfg = a.config.empty() ? ModelConfig{} : load_config(a.config);
    cfg.seed = seed;
    model = std::make_unique<Model>(cfg);
  }
  // Fail on missing prerequisites before reading data or touching --out.
  if (!a.resume.empty()) check_prerequisites(*model, a.stage);

  const Dataset ds = load_dataset(a.data);
  StageRecipe recipe = a.paper_recipe ? StageRecipe::paper(a.stage) : StageRecipe::desk(a.stage);
  if (a.steps > 0) recipe.steps = a.steps;
  const std::size_t examples = a.stage == 3 ? ds.t2m.size() + ds.mosit.size() : ds.pairs.size();

  nlohmann::json header = {{"seed", seed},
                           {"config_hash", fnv1a_hex(config_hash(model->config()))},
                           {"dataset_hash", dataset_hash(a.data)},
                           {"paper_recipe", a.paper_recipe},
                           {"steps", recipe.total_steps(examples)},
                           {"recipe", recipe.to_json()},
                           {"resume", a.resume},
                           {"provenance_in", model->provenance()}};
  print_header(out, header, recipe);

  ensure_dir(a.out);
  {
    auto f = open_out(fs::path(a.out) / "run.json");
    f << header.dump(2) << "\n";
  }
  auto metrics = open_out(fs::path(a.out) / "metrics.jsonl");
  const auto sink_for = [&](const std::string& phase) {
    return [&metrics, phase](const StepRecord& r) {
      nlohmann::json j = r.to_json();
      j["phase"] = phase;
      metrics << j.dump() << "\n";
    };
  };

  Rng rng = Rng::derive(seed, 100 + static_cast<std::uint64_t>(a.stage));
  if (a.stage == 1 && !model->has(kStepLlmPretrain)) {
    // A fresh model first gets its frozen backbones.
    PretrainOptions po;
    po.steps = a.pretrain_steps;
    const auto r = pretrain_llm(*model, pretraining_texts(*model, ds), po, rng, sink_for(kStepLlmPretrain));
    out << "llm pretrain    " << r.steps << " steps, final loss " << fmt(r.last.total) << "\n";
  }
  if (a.stage == 1 && !model->has(kStepDiffusionPretrain)) {
    PretrainOptions po;
    po.steps = a.diffusion_steps;
    po.batch_size = 32;
    const auto r = pretrain_diffusion(*model, po, rng, sink_for(kStepDiffusionPretrain));
    out << "diffusion       " << r.steps << " steps, final loss " << fmt(r.last.total) << "\n";
  }

  const StageResult res = run_stage(a.stage, recipe, ds, *model, rng, sink_for("stage" + std::to_string(a.stage)));
  model->save(a.out);
  out << "stage " << a.stage << "         " << res.steps << " steps, final " << res.last.to_json().dump() << "\n";
  if (a.stage == 1) out << "caption CE      " << fmt(caption_ce(*model, ds.pairs)) << " nats/token\n";
  if (a.stage == 2) {
    const AlignmentEval ev = evaluate_alignment(*model, ds.pairs);
    out << "signal accuracy " << fmt(ev.signal_accuracy) << "  mean cosine " << fmt(ev.mean_cosine) << "\n";
  }
  out << "checkpoint      " << a.out << "\n";
  return kExitOk;
}

// --- infer -------------------------------------------------------------------

struct InferArgs {
  std::string ckpt;
  std::string prompt;
  std::vector<std::string> attach;
  std::optional<std::uint64_t> seed;
  std::string out;
  int max_new = 96;
  int samples = 1;
};

std::pair<Modality, fs::path> parse_attach(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == spec.size()) {
    throw UsageError("--attach expects modality:path, got \"" + spec + "\"");
  }
  const auto m = modality_from_string(spec.substr(0, colon));
  if (!m || *m == Modality::kText) throw UsageError("--attach modality must be image, audio or video, got \"" + spec.substr(0, colon) + "\"");
  return {*m, spec.substr(colon + 1)};
}

int infer(const InferArgs& a, std::ostream& out) {
  std::vector<std::pair<Modality, fs::path>> attachments;
  for (const auto& s : a.attach) attachments.push_back(parse_attach(s));
  if (a.max_new < 1) throw UsageError("--max-new must be >= 1");
  if (a.samples < 1) throw UsageError("--samples must be >= 1");
  const std::uint64_t seed = resolve_seed(a.seed);

  const auto model = Model::load(a.ckpt);
  InferenceRequest req;
  req.prompt = a.prompt;
  req.max_new = a.max_new;
  req.samples = a.samples;
  for (const auto& [m, path] : attachments) {
    if (!fs::is_regular_file(path)) throw Error(ErrorKind::kIo, "attachment not found: " + path.string());
    const Blob b = read_blob(path);
    req.attachments.push_back(RawSample{m, b.shape, b.data});
  }
  Rng rng = Rng::derive(seed, 200);
  const InferenceResult res = run_inference(*model, req, rng);
  nlohmann::json record = res.to_json();
  record["seed"] = seed;
  record["checkpoint"] = a.ckpt;
  out << record.dump(2) << "\n";
  if (!a.out.empty()) {
    ensure_dir(a.out);
    save_inference(a.out, res);
    auto f = open_out(fs::path(a.out) / "record.json");
    f << record.dump(2) << "\n";
  }
  return kExitOk;
}

// --- param-budget ------------------------------------------------------------

struct BudgetArgs {
  std::string config;
  bool paper_scale = false;
};

std::vector<BudgetEntry> model_entries(const ModelConfig& cfg) {
  const Model model(cfg);
  std::map<std::pair<std::string, Role>, double> counts;
  for (const auto& p : model.store().params()) {
    // llm.base and llm.lora are reported apart; everything else by module.
    std::string group = p.module();
    if (group == "llm") group = p.name.substr(0, p.name.find('.', 4));
    counts[{group, p.role}] += static_cast<double>(p.value().size());
  }
  std::vector<BudgetEntry> entries;
  for (const auto& [key, n] : counts) entries.push_back({key.first, n, key.second});
  return entries;
}

std::vector<BudgetEntry> entries_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::kInvalidConfig, "cannot read " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidConfig, path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("entries")) return model_entries(config_from_json(j));
  // An explicit component list: {"entries": [{"name", "count", "role"}]}.
  std::vector<BudgetEntry> entries;
  try {
    for (const auto& e : j.at("entries")) {
      const auto role = role_from_string(e.at("role").get<std::string>());
      if (!role) throw Error(ErrorKind::kInvalidConfig, "unknown role in " + path);
      entries.push_back({e.at("name").get<std::string>(), e.at("count").get<double>(), *role});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidConfig, path + ": " + e.what());
  }
  return entries;
}

std::string approx_percent(double ratio) {
  std::ostringstream s;
  const double pct = ratio * 100.0;
  if (pct >= 0.5) {
    s << "≈" << std::llround(pct) << "%";
  } else {
    s << "≈" << std::setprecision(2) << pct << "%";
  }
  return s.str();
}

int param_budget_cmd(const BudgetArgs& a, std::ostream& out) {
  if (a.config.empty() == !a.paper_scale) throw UsageError("give exactly one of --config FILE or --paper-scale");
  std::vector<BudgetEntry> entries;
  try {
    entries = a.paper_scale ? paper_scale_entries() : entries_from_file(a.config);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  ParamBudget b;
  try {
    b = param_budget(entries);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  out << "source          " << (a.paper_scale ? std::string("paper-scale component sizes") : a.config) << "\n";
  out << std::left << std::setw(28) << "component" << std::setw(11) << "role" << std::right << std::setw(16)
      << "parameters" << "\n";
  for (const auto& e : b.entries) {
    out << std::left << std::setw(28) << e.name << std::setw(11) << to_string(e.role) << std::right
        << std::setw(16) << std::fixed << std::setprecision(0) << e.count << "\n";
  }
  out << std::left << std::setw(39) << "trainable total" << std::right << std::setw(16) << b.trainable_total << "\n"
      << std::left << std::setw(39) << "frozen total" << std::right << std::setw(16) << b.frozen_total << "\n"
      << std::defaultfloat << std::setprecision(4) << "ratio " << std::fixed << std::setprecision(5) << b.ratio
      << " (" << approx_percent(b.ratio) << ")\n";
  return kExitOk;
}

// --- sweep-signals -------------------------------------------------------------

struct SweepArgs {
  std::string counts;
  std::string data;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
  int steps = 150;
  int pretrain_steps = 600;
  int diffusion_steps = 400;
};

std::vector<int> parse_counts(const std::string& s) {
  std::vector<int> counts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument("bad");
      counts.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--counts expects positive integers separated by commas, got \"" + s + "\"");
    }
  }
  if (counts.empty()) throw UsageError("--counts is empty");
  std::sort(counts.begin(), counts.end());
  counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
  return counts;
}

int sweep_signals(const SweepArgs& a, std::ostream& out) {
  const std::vector<int> counts = parse_counts(a.counts);
  if (a.steps < 1) throw UsageError("--steps must be >= 1");
  const std::uint64_t seed = resolve_seed(a.seed);
  const Dataset ds = load_dataset(a.data);
  const nlohmann::json header = {{"seed", seed},
                                 {"dataset_hash", dataset_hash(a.data)},
                                 {"counts", counts},
                                 {"steps", a.steps},
                                 {"resume", a.resume},
                                 {"recipe", StageRecipe::desk(2).to_json()}};
  out << "== sweep-signals ==\n"
      << "seed            " << seed << "\n"
      << "dataset hash    " << header.at("dataset_hash").get<std::string>() << "\n"
      << "steps per count " << a.steps << "\n";
  ensure_dir(a.out);
  {
    auto f = open_out(fs::path(a.out) / "run.json");
    f << header.dump(2) << "\n";
  }

  // Shared frozen backbones; stage 2 itself only trains the output side.
  fs::path base = a.resume;
  if (base.empty()) {
    base = fs::path(a.out) / "base";
    ModelConfig cfg;
    cfg.seed = seed;
    Model model(cfg);
    Rng rng = Rng::derive(seed, 300);
    PretrainOptions po;
    po.steps = a.pretrain_steps;
    pretrain_llm(model, pretraining_texts(model, ds), po, rng);
    po.steps = a.diffusion_steps;
    po.batch_size = 32;
    pretrain_diffusion(model, po, rng);
    model.save(base);
  }
  const auto base_model = Model::load(base);

  // One row per count; rows come out sorted because counts are.
  std::vector<std::pair<int, std::map<Modality, LossBreakdown>>> rows;
  for (int k : counts) {
    ModelConfig cfg = base_model->config();
    for (Modality m : kGeneratedModalities) cfg.signal_counts[m] = k;
    Model model(cfg);
    model.import_from(base, [](const std::string& n) { return n.rfind("outproj.", 0) != 0; },
                      {kStepLlmPretrain, kStepDiffusionPretrain});
    // Stage 2 never reads the input projection, so the sweep skips stage 1.
    model.mark(kStepStage1);
    seed_signal_rows(model);
    StageRecipe recipe = StageRecipe::desk(2);
    recipe.steps = a.steps;
    Rng rng = Rng::derive(seed, 400 + static_cast<std::uint64_t>(k));
    train_stage2(model, ds.pairs, recipe, rng);
    auto& row = rows.emplace_back(k, std::map<Modality, LossBreakdown>{}).second;
    for (Modality m : kGeneratedModalities) {
      const auto pairs = pairs_of(ds, m);
      std::vector<const CaptionPair*> ptrs;
      for (const auto& p : pairs) ptrs.push_back(&p);
      Rng eval_rng = Rng::derive(seed, 500);
      ag::NoGradGuard no_grad;
      const LossBreakdown l = stage2_loss(model, ptrs, recipe, Mode::kEval, eval_rng).parts;
      for (double v : {l.nll_signal, l.align_l2, l.denoise}) {
        if (!std::isfinite(v)) throw Error(ErrorKind::kNumeric, "non-finite sweep loss at count " + std::to_string(k));
      }
      row[m] = l;
    }
    out << "count " << k << " done\n";
  }

  auto csv = open_out(fs::path(a.out) / "sweep.csv");
  auto table = open_out(fs::path(a.out) / "sweep.txt");
  std::ostringstream t;
  csv << "count";
  t << std::right << std::setw(6) << "count";
  for (Modality m : kGeneratedModalities) {
    for (const char* col : {"nll", "align", "denoise"}) {
      const std::string name = std::string(to_string(m)) + "_" + col;
      csv << "," << name;
      t << std::setw(15) << name;
    }
  }
  csv << "\n";
  t << "\n";
  for (const auto& [k, losses] : rows) {
    csv << k;
    t << std::setw(6) << k << std::fixed << std::setprecision(5);
    for (Modality m : kGeneratedModalities) {
      const LossBreakdown& l = losses.at(m);
      for (double v : {l.nll_signal, l.align_l2, l.denoise}) {
        csv << "," << std::setprecision(10) << v;
        t << std::setw(15) << std::setprecision(5) << v;
      }
    }
    csv << std::defaultfloat << "\n";
    t << std::defaultfloat << "\n";
  }
  table << t.str();
  out << t.str();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"nxgpt: toy any-to-any multimodal pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "nxgpt 0.1.0");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  gen->add_option("--out", gd.out, "Dataset directory")->required();
  gen->add_option("--seed", gd.seed, "Seed (default: NXGPT_SEED, then 1234)");
  gen->add_option("--pairs", gd.pairs, "Caption pairs per modality");
  gen->add_option("--dialogues", gd.dialogues, "Multi-turn dialogues");

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Run one training stage");
  trn->add_option("--stage", tr.stage, "1 (encoding), 2 (decoding), 3 (instruction tuning)")
      ->required()
      ->check(CLI::IsMember({1, 2, 3}));
  trn->add_option("--data", tr.data, "Dataset directory")->required();
  trn->add_option("--out", tr.out, "Checkpoint directory")->required();
  trn->add_option("--resume", tr.resume, "Checkpoint of the previous stage");
  trn->add_option("--config", tr.config, "Model config JSON for a fresh model");
  trn->add_flag("--paper-recipe", tr.paper_recipe, "Use the published hyperparameters");
  trn->add_option("--seed", tr.seed, "Seed (default: NXGPT_SEED, then 1234)");
  trn->add_option("--steps", tr.steps, "Override the number of optimizer steps");
  trn->add_option("--pretrain-steps", tr.pretrain_steps, "LLM pretraining steps for a fresh model");
  trn->add_option("--diffusion-steps", tr.diffusion_steps, "Diffusion pretraining steps for a fresh model");

  InferArgs in;
  auto* inf = app.add_subcommand("infer", "Generate a reply and route it to decoders");
  inf->add_option("--ckpt", in.ckpt, "Checkpoint directory")->required();
  inf->add_option("--prompt", in.prompt, "User message")->required();
  inf->add_option("--attach", in.attach, "modality:path to a tensor blob (repeatable)");
  inf->add_option("--seed", in.seed, "Seed (default: NXGPT_SEED, then 1234)");
  inf->add_option("--out", in.out, "Also save record.json and latent blobs here");
  inf->add_option("--max-new", in.max_new, "Generation limit in tokens");
  inf->add_option("--samples", in.samples, "Latents per activated decoder");

  BudgetArgs pb;
  auto* bud = app.add_subcommand("param-budget", "Trainable versus frozen parameter counts");
  bud->add_option("--config", pb.config, "Model config JSON, or {\"entries\": [...]}");
  bud->add_flag("--paper-scale", pb.paper_scale, "Use the full-scale component sizes");

  SweepArgs sw;
  auto* swp = app.add_subcommand("sweep-signals", "Stage-2 losses against the number of signal tokens");
  swp->add_option("--counts", sw.counts, "Comma-separated signal-token counts")->required();
  swp->add_option("--data", sw.data, "Dataset directory")->required();
  swp->add_option("--out", sw.out, "Output directory")->required();
  swp->add_option("--resume", sw.resume, "Checkpoint with pretrained backbones");
  swp->add_option("--seed", sw.seed, "Seed (default: NXGPT_SEED, then 1234)");
  swp->add_option("--steps", sw.steps, "Stage-2 steps per count");
  swp->add_option("--pretrain-steps", sw.pretrain_steps, "LLM pretraining steps when no --resume");
  swp->add_option("--diffusion-steps", sw.diffusion_steps, "Diffusion pretraining steps when no --resume");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return gen_data(gd, out);
    if (*trn) return train(tr, out);
    if (*inf) return infer(in, out);
    if (*bud) return param_budget_cmd(pb, out);
    if (*swp) return sweep_signals(sw, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace nxgpt
