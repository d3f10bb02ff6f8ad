#include "nxgpt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "nxgpt/error.hpp"

namespace nxgpt {

using nlohmann::json;

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::kText: return "text";
    case Modality::kImage: return "image";
    case Modality::kAudio: return "audio";
    case Modality::kVideo: return "video";
  }
  return "?";
}

std::optional<Modality> modality_from_string(std::string_view name) {
  if (name == "text") return Modality::kText;
  if (name == "image") return Modality::kImage;
  if (name == "audio") return Modality::kAudio;
  if (name == "video") return Modality::kVideo;
  return std::nullopt;
}

std::string_view to_string(Role r) { return r == Role::kFrozen ? "frozen" : "trainable"; }

std::optional<Role> role_from_string(std::string_view name) {
  if (name == "frozen") return Role::kFrozen;
  if (name == "trainable") return Role::kTrainable;
  return std::nullopt;
}

int ModelConfig::signal_count(Modality m) const {
  auto it = signal_counts.find(m);
  return it == signal_counts.end() ? 0 : it->second;
}

OutProjConfig ModelConfig::paper_outproj() {
  OutProjConfig c;
  c.hidden = 512;
  c.heads = 4;
  c.enc_layers = 4;
  c.dec_layers = 4;
  c.dropout = 0.1;
  return c;
}

ValidationReport validate_config(const ModelConfig& cfg) {
  ValidationReport r;
  auto need_positive = [&](int v, const char* what) {
    if (v <= 0) r.violations.push_back(std::string(what) + " must be positive");
  };
  need_positive(cfg.feature_dim, "feature_dim");
  need_positive(cfg.llm.layers, "llm.layers");
  need_positive(cfg.llm.heads, "llm.heads");
  need_positive(cfg.llm.dim, "llm.dim");
  need_positive(cfg.llm.ffn_mult, "llm.ffn_mult");
  need_positive(cfg.llm.max_seq, "llm.max_seq");
  if (cfg.llm.heads > 0 && cfg.llm.dim % cfg.llm.heads != 0) {
    r.violations.push_back("llm.dim must be divisible by llm.heads");
  }
  need_positive(cfg.grouping.heads, "grouping.heads");
  if (cfg.grouping.heads > 0 && cfg.feature_dim % cfg.grouping.heads != 0) {
    r.violations.push_back("feature_dim must be divisible by grouping.heads");
  }
  const auto& m = cfg.grouping.stage_sizes;
  if (m.empty()) r.violations.push_back("grouping needs at least one stage");
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] < 1) r.violations.push_back("stage sizes must be >= 1");
    if (i > 0 && m[i] >= m[i - 1]) r.violations.push_back("stage sizes must decrease");
  }
  if (cfg.signal_count(Modality::kText) != 0) {
    r.violations.push_back("text must have zero signal tokens");
  }
  for (Modality mod : kGeneratedModalities) {
    if (cfg.signal_count(mod) < 1) {
      r.violations.push_back("signal count for " + std::string(to_string(mod)) + " must be >= 1");
    }
  }
  need_positive(cfg.lora.rank, "lora.rank");
  if (cfg.lora.alpha <= 0) r.violations.push_back("lora.alpha must be positive");
  for (const auto& t : cfg.lora.targets) {
    if (t != "q" && t != "k" && t != "v" && t != "o") {
      r.violations.push_back("unknown lora target '" + t + "'");
    }
  }
  need_positive(cfg.outproj.hidden, "outproj.hidden");
  need_positive(cfg.outproj.heads, "outproj.heads");
  need_positive(cfg.outproj.enc_layers, "outproj.enc_layers");
  need_positive(cfg.outproj.dec_layers, "outproj.dec_layers");
  need_positive(cfg.outproj.queries, "outproj.queries");
  if (cfg.outproj.heads > 0 && cfg.outproj.hidden % cfg.outproj.heads != 0) {
    r.violations.push_back("outproj.hidden must be divisible by outproj.heads");
  }
  if (!(cfg.outproj.dropout >= 0.0 && cfg.outproj.dropout < 1.0)) {
    r.violations.push_back("dropout must be in [0, 1)");
  }
  need_positive(cfg.diffusion.steps, "diffusion.steps");
  need_positive(cfg.diffusion.hidden, "diffusion.hidden");
  need_positive(cfg.diffusion.cond_dim, "diffusion.cond_dim");
  if (!(cfg.diffusion.beta_start > 0 && cfg.diffusion.beta_end < 1 &&
        cfg.diffusion.beta_start <= cfg.diffusion.beta_end)) {
    r.violations.push_back("diffusion betas must satisfy 0 < start <= end < 1");
  }
  const auto& e = cfg.encoder;
  need_positive(e.image_size, "encoder.image_size");
  need_positive(e.image_channels, "encoder.image_channels");
  need_positive(e.image_patch, "encoder.image_patch");
  need_positive(e.audio_length, "encoder.audio_length");
  need_positive(e.audio_window, "encoder.audio_window");
  need_positive(e.video_frames, "encoder.video_frames");
  need_positive(e.video_size, "encoder.video_size");
  need_positive(e.video_patch, "encoder.video_patch");
  if (e.image_patch > 0 && e.image_size % e.image_patch != 0) {
    r.violations.push_back("image_size must be a multiple of image_patch");
  }
  if (e.audio_window > 0 && e.audio_length % e.audio_window != 0) {
    r.violations.push_back("audio_length must be a multiple of audio_window");
  }
  if (e.video_patch > 0 && e.video_size % e.video_patch != 0) {
    r.violations.push_back("video_size must be a multiple of video_patch");
  }
  return r;
}

// --- JSON ------------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      fail(std::string("bad value for '") + key + "'");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail("unknown key '" + k + "'");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(ErrorKind::kInvalidConfig, (path_.empty() ? "" : path_ + ": ") + msg);
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string kind_name(InputProjectionKind k) { return k == InputProjectionKind::kGrouping ? "grouping" : "linear"; }

}  // namespace

json to_json(const ModelConfig& c) {
  json signals = json::object();
  for (const auto& [m, n] : c.signal_counts) signals[std::string(to_string(m))] = n;
  return json{
      {"feature_dim", c.feature_dim},
      {"encoder",
       {{"image_size", c.encoder.image_size},
        {"image_channels", c.encoder.image_channels},
        {"image_patch", c.encoder.image_patch},
        {"audio_length", c.encoder.audio_length},
        {"audio_window", c.encoder.audio_window},
        {"video_frames", c.encoder.video_frames},
        {"video_size", c.encoder.video_size},
        {"video_patch", c.encoder.video_patch}}},
      {"grouping",
       {{"kind", kind_name(c.grouping.kind)}, {"stage_sizes", c.grouping.stage_sizes}, {"heads", c.grouping.heads}}},
      {"llm",
       {{"layers", c.llm.layers},
        {"heads", c.llm.heads},
        {"dim", c.llm.dim},
        {"ffn_mult", c.llm.ffn_mult},
        {"max_seq", c.llm.max_seq}}},
      {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"targets", c.lora.targets}}},
      {"signal_counts", signals},
      {"outproj",
       {{"hidden", c.outproj.hidden},
        {"heads", c.outproj.heads},
        {"enc_layers", c.outproj.enc_layers},
        {"dec_layers", c.outproj.dec_layers},
        {"dropout", c.outproj.dropout},
        {"queries", c.outproj.queries}}},
      {"diffusion",
       {{"steps", c.diffusion.steps},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"hidden", c.diffusion.hidden},
        {"cond_dim", c.diffusion.cond_dim}}},
      {"seed", c.seed},
  };
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  Reader root(j, "");
  root.get("feature_dim", c.feature_dim);
  root.get("seed", c.seed);
  if (const json* e = root.child("encoder")) {
    Reader r(*e, "encoder");
    r.get("image_size", c.encoder.image_size);
    r.get("image_channels", c.encoder.image_channels);
    r.get("image_patch", c.encoder.image_patch);
    r.get("audio_length", c.encoder.audio_length);
    r.get("audio_window", c.encoder.audio_window);
    r.get("video_frames", c.encoder.video_frames);
    r.get("video_size", c.encoder.video_size);
    r.get("video_patch", c.encoder.video_patch);
    r.finish();
  }
  if (const json* g = root.child("grouping")) {
    Reader r(*g, "grouping");
    std::string kind = kind_name(c.grouping.kind);
    r.get("kind", kind);
    if (kind == "grouping") {
      c.grouping.kind = InputProjectionKind::kGrouping;
    } else if (kind == "linear") {
      c.grouping.kind = InputProjectionKind::kLinear;
    } else {
      r.fail("kind must be 'grouping' or 'linear'");
    }
    r.get("stage_sizes", c.grouping.stage_sizes);
    r.get("heads", c.grouping.heads);
    r.finish();
  }
  if (const json* l = root.child("llm")) {
    Reader r(*l, "llm");
    r.get("layers", c.llm.layers);
    r.get("heads", c.llm.heads);
    r.get("dim", c.llm.dim);
    r.get("ffn_mult", c.llm.ffn_mult);
    r.get("max_seq", c.llm.max_seq);
    r.finish();
  }
  if (const json* l = root.child("lora")) {
    Reader r(*l, "lora");
    r.get("rank", c.lora.rank);
    r.get("alpha", c.lora.alpha);
    r.get("targets", c.lora.targets);
    r.finish();
  }
  if (const json* s = root.child("signal_counts")) {
    if (!s->is_object()) root.fail("signal_counts must be an object");
    for (const auto& [k, v] : s->items()) {
      auto m = modality_from_string(k);
      if (!m) root.fail("signal_counts: unknown modality '" + k + "'");
      if (!v.is_number_integer()) root.fail("signal_counts: '" + k + "' must be an integer");
      c.signal_counts[*m] = v.get<int>();
    }
  }
  if (const json* o = root.child("outproj")) {
    Reader r(*o, "outproj");
    r.get("hidden", c.outproj.hidden);
    r.get("heads", c.outproj.heads);
    r.get("enc_layers", c.outproj.enc_layers);
    r.get("dec_layers", c.outproj.dec_layers);
    r.get("dropout", c.outproj.dropout);
    r.get("queries", c.outproj.queries);
    r.finish();
  }
  if (const json* d = root.child("diffusion")) {
    Reader r(*d, "diffusion");
    r.get("steps", c.diffusion.steps);
    r.get("beta_start", c.diffusion.beta_start);
    r.get("beta_end", c.diffusion.beta_end);
    r.get("hidden", c.diffusion.hidden);
    r.get("cond_dim", c.diffusion.cond_dim);
    r.finish();
  }
  root.finish();
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInvalidConfig, path + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const ModelConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write config " + path);
  out << to_json(cfg).dump(2) << "\n";
}

std::uint64_t config_hash(const ModelConfig& cfg) {
  const std::string s = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// --- budget ----------------------------------------------------------------

ParamBudget param_budget(const std::vector<BudgetEntry>& entries) {
  ParamBudget b;
  b.entries = entries;
  for (const auto& e : entries) {
    if (e.count < 0) throw Error(ErrorKind::kInvalidInput, "negative parameter count for " + e.name);
    (e.role == Role::kTrainable ? b.trainable_total : b.frozen_total) += e.count;
  }
  const double total = b.trainable_total + b.frozen_total;
  if (total == 0) throw Error(ErrorKind::kDegenerateInput, "parameter budget has zero total");
  b.ratio = b.trainable_total / total;
  return b;
}

std::vector<BudgetEntry> paper_scale_entries() {
  return {
      {"encoder.imagebind", 1.2e9, Role::kFrozen},
      {"input_projection.grouping", 28e6, Role::kTrainable},
      {"llm.vicuna", 7e9, Role::kFrozen},
      {"llm.lora", 33e6, Role::kTrainable},
      {"output_projection.image", 31e6, Role::kTrainable},
      {"output_projection.audio", 31e6, Role::kTrainable},
      {"output_projection.video", 32e6, Role::kTrainable},
      {"diffusion.sd", 1.3e9, Role::kFrozen},
      {"diffusion.zeroscope", 1.8e9, Role::kFrozen},
      {"diffusion.audioldm", 0.975e9, Role::kFrozen},
  };
}

}  // namespace nxgpt
