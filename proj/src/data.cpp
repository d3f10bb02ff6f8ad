#include "nxgpt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "nxgpt/checkpoint.hpp"
#include "nxgpt/error.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kImageModes = {"left", "right", "top", "bottom"};
const std::vector<std::string> kAudioModes = {"low", "mid", "high"};
const std::vector<std::string> kVideoModes = {"left", "right", "up", "down"};
const std::vector<std::string> kColors = {"red", "green", "blue"};
const std::vector<std::string> kLoudness = {"soft", "loud"};

const std::array<std::array<float, 3>, 3> kRgb = {{{1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.2f, 0.2f, 1.0f}}};

const std::vector<std::string> kT2mTemplates = {"make {}", "create {}, please", "i want {}", "show me {}"};
const std::vector<std::string> kAcks = {"sure.", "here it is.", "ok."};

struct Chat {
  const char* human;
  const char* machine;
};
const std::vector<Chat> kChat = {{"hi", "hello!"}, {"thanks", "you are welcome."}, {"cool", "glad you like it."}};
const std::vector<std::string> kDescribeAsks = {"what is this?", "describe this."};

std::string fill(const std::string& tmpl, const std::string& value) {
  std::string out = tmpl;
  out.replace(out.find("{}"), 2, value);
  return out;
}

void check_generated(Modality m) {
  if (m == Modality::kText) throw Error(ErrorKind::kWrongModality, "text has no payload or latent space");
}

void splat(std::vector<float>& data, std::size_t offset, int size, int channels, double row, double col,
           double sigma, const std::array<float, 3>& rgb) {
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double d2 = (r - row) * (r - row) + (c - col) * (c - col);
      const double w = std::exp(-d2 / (2 * sigma * sigma));
      for (int ch = 0; ch < channels; ++ch) {
        float& px = data[offset + (static_cast<std::size_t>(r) * size + c) * channels + ch];
        px = std::min(1.0f, px + static_cast<float>(w * rgb[static_cast<std::size_t>(ch % 3)]));
      }
    }
  }
}

// Latent coordinate in [-3, 3] to pixel position; +y points up.
double to_col(double x, int size) { return std::clamp((x + 3.0) / 6.0, 0.0, 1.0) * (size - 1); }
double to_row(double y, int size) { return std::clamp((3.0 - y) / 6.0, 0.0, 1.0) * (size - 1); }

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

const std::vector<std::string>& mode_names(Modality m) {
  switch (m) {
    case Modality::kImage: return kImageModes;
    case Modality::kAudio: return kAudioModes;
    case Modality::kVideo: return kVideoModes;
    case Modality::kText: break;
  }
  check_generated(m);
  return kImageModes;
}

const std::vector<std::string>& attribute_names(Modality m) {
  check_generated(m);
  return m == Modality::kAudio ? kLoudness : kColors;
}

std::vector<double> mode_center(Modality m, int mode) {
  const int n = static_cast<int>(mode_names(m).size());
  if (mode < 0 || mode >= n) throw Error(ErrorKind::kOutOfRange, "mode index " + std::to_string(mode));
  switch (m) {
    case Modality::kImage: {
      static const double c[4][2] = {{-2, 0}, {2, 0}, {0, 2}, {0, -2}};
      return {c[mode][0], c[mode][1]};
    }
    case Modality::kAudio: return {-2.0 + 2.0 * mode};
    case Modality::kVideo: {
      static const double c[4][4] = {{1.5, 0, -1.5, 0}, {-1.5, 0, 1.5, 0}, {0, -1.5, 0, 1.5}, {0, 1.5, 0, -1.5}};
      return {c[mode][0], c[mode][1], c[mode][2], c[mode][3]};
    }
    case Modality::kText: break;
  }
  return {};
}

int nearest_mode(Modality m, const std::vector<double>& latent) {
  int best = 0;
  double best_d = INFINITY;
  for (int k = 0; k < static_cast<int>(mode_names(m).size()); ++k) {
    const auto c = mode_center(m, k);
    if (c.size() != latent.size()) throw Error(ErrorKind::kShapeMismatch, "latent width");
    double d = 0;
    for (std::size_t i = 0; i < c.size(); ++i) d += (c[i] - latent[i]) * (c[i] - latent[i]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

std::string describe(Modality m, int mode, int attribute) {
  const auto& modes = mode_names(m);
  const auto& attrs = attribute_names(m);
  if (mode < 0 || mode >= static_cast<int>(modes.size()) || attribute < 0 ||
      attribute >= static_cast<int>(attrs.size())) {
    throw Error(ErrorKind::kOutOfRange, "caption parameters out of range");
  }
  const auto& md = modes[static_cast<std::size_t>(mode)];
  const auto& at = attrs[static_cast<std::size_t>(attribute)];
  switch (m) {
    case Modality::kImage: return "a " + at + " dot at " + md;
    case Modality::kAudio: return "a " + at + " " + md + " tone";
    case Modality::kVideo: return "a " + at + " dot moving " + md;
    case Modality::kText: break;
  }
  return {};
}

RawSample render_payload(Modality m, const std::vector<double>& latent, int attribute, const EncoderConfig& enc) {
  check_generated(m);
  RawSample s;
  s.modality = m;
  const auto& rgb = kRgb[static_cast<std::size_t>(attribute % 3)];
  switch (m) {
    case Modality::kImage: {
      const int n = enc.image_size;
      s.shape = {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(n),
                 static_cast<std::uint32_t>(enc.image_channels)};
      s.data.assign(static_cast<std::size_t>(n * n * enc.image_channels), 0.0f);
      splat(s.data, 0, n, enc.image_channels, to_row(latent[1], n), to_col(latent[0], n), 1.5, rgb);
      break;
    }
    case Modality::kAudio: {
      const int n = enc.audio_length;
      s.shape = {static_cast<std::uint32_t>(n)};
      const double amp = attribute == 0 ? 0.3 : 0.9;
      const double cycles = 3.0 + 1.5 * (std::clamp(latent[0], -3.0, 3.0) + 3.0);
      for (int i = 0; i < n; ++i) {
        s.data.push_back(static_cast<float>(amp * std::sin(2 * std::numbers::pi * cycles * i / n)));
      }
      break;
    }
    case Modality::kVideo: {
      const int f = enc.video_frames;
      const int n = enc.video_size;
      const int ch = enc.image_channels;
      s.shape = {static_cast<std::uint32_t>(f), static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(n),
                 static_cast<std::uint32_t>(ch)};
      s.data.assign(static_cast<std::size_t>(f * n * n * ch), 0.0f);
      for (int k = 0; k < f; ++k) {
        const double w = f == 1 ? 0.0 : static_cast<double>(k) / (f - 1);
        const double x = (1 - w) * latent[0] + w * latent[2];
        const double y = (1 - w) * latent[1] + w * latent[3];
        splat(s.data, static_cast<std::size_t>(k * n * n * ch), n, ch, to_row(y, n), to_col(x, n), 1.0, rgb);
      }
      break;
    }
    case Modality::kText: break;
  }
  return s;
}

Mat CaptionPair::latent_row() const {
  Mat r(1, static_cast<Eigen::Index>(latent.size()));
  for (std::size_t i = 0; i < latent.size(); ++i) r(0, static_cast<Eigen::Index>(i)) = latent[i];
  return r;
}

CaptionPair make_pair(Modality m, const std::string& id, Rng& rng, const EncoderConfig& enc) {
  check_generated(m);
  CaptionPair p;
  p.id = id;
  p.modality = m;
  p.mode = rng.below(static_cast<int>(mode_names(m).size()));
  p.attribute = rng.below(static_cast<int>(attribute_names(m).size()));
  for (double c : mode_center(m, p.mode)) {
    // float32-representable so the record survives any serialisation.
    p.latent.push_back(static_cast<double>(static_cast<float>(c + kModeStd * rng.normal())));
  }
  p.caption = describe(m, p.mode, p.attribute);
  p.payload = render_payload(m, p.latent, p.attribute, enc);
  p.payload_ref = "blobs/" + id + ".bin";
  return p;
}

std::vector<CaptionPair> gen_caption_pairs(Modality m, int n, std::uint64_t seed, const EncoderConfig& enc) {
  check_generated(m);
  if (n < 1) throw Error(ErrorKind::kInvalidParameter, "need at least one pair");
  std::vector<CaptionPair> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(m) * 1000003ULL + static_cast<std::uint64_t>(i));
    out.push_back(make_pair(m, std::string(to_string(m)) + "-" + std::to_string(i), rng, enc));
  }
  return out;
}

int t2m_template_count() { return static_cast<int>(kT2mTemplates.size()); }

Dialogue wrap_t2m(const CaptionPair& pair, int template_id, std::uint64_t seed) {
  if (template_id < 0 || template_id >= t2m_template_count()) {
    throw Error(ErrorKind::kUnknownTemplate, "no instruction template " + std::to_string(template_id));
  }
  Rng rng = Rng::derive(seed, fnv1a(pair.id.data(), pair.id.size()));
  Dialogue d;
  d.id = "t2m-" + pair.id;
  d.messages.push_back({Speaker::kHuman, fill(kT2mTemplates[static_cast<std::size_t>(template_id)], pair.caption), {}});
  d.messages.push_back({Speaker::kMachine, kAcks[static_cast<std::size_t>(rng.below(static_cast<int>(kAcks.size())))],
                        {pair}});
  return d;
}

std::vector<Dialogue> gen_mosit_dialogues(int n, std::uint64_t seed, const EncoderConfig& enc) {
  if (n < 1) throw Error(ErrorKind::kInvalidParameter, "need at least one dialogue");
  std::vector<Dialogue> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, 0x6d6f736974ULL + static_cast<std::uint64_t>(i));
    Dialogue d;
    d.id = "mosit-" + std::to_string(i);
    d.topic = rng.below(100);
    const int turns = kMinTurns + rng.below(kMaxTurns - kMinTurns + 1);
    for (;;) {
      d.messages.clear();
      std::set<Modality> seen;
      bool machine_output = false;
      int items = 0;
      auto item = [&](Modality m) {
        const std::string id = d.id + "-" + std::to_string(items++);
        seen.insert(m);
        return make_pair(m, id, rng, enc);
      };
      auto any_modality = [&] { return kGeneratedModalities[static_cast<std::size_t>(rng.below(3))]; };
      for (int t = 0; t < turns; ++t) {
        const double u = rng.uniform();
        if (u < 0.4) {
          CaptionPair p = item(any_modality());
          const auto& tmpl = kT2mTemplates[static_cast<std::size_t>(rng.below(t2m_template_count()))];
          d.messages.push_back({Speaker::kHuman, fill(tmpl, p.caption), {}});
          d.messages.push_back(
              {Speaker::kMachine, kAcks[static_cast<std::size_t>(rng.below(static_cast<int>(kAcks.size())))], {p}});
          machine_output = true;
        } else if (u < 0.55) {
          const Modality a = any_modality();
          Modality b = any_modality();
          while (b == a) b = any_modality();
          CaptionPair pa = item(a);
          CaptionPair pb = item(b);
          d.messages.push_back({Speaker::kHuman, "make " + pa.caption + " and " + pb.caption, {}});
          d.messages.push_back({Speaker::kMachine, "here they are.", {pa, pb}});
          machine_output = true;
        } else if (u < 0.85) {
          CaptionPair p = item(any_modality());
          const auto& ask = kDescribeAsks[static_cast<std::size_t>(rng.below(static_cast<int>(kDescribeAsks.size())))];
          const std::string answer = "it is " + p.caption + ".";
          d.messages.push_back({Speaker::kHuman, ask, {p}});
          d.messages.push_back({Speaker::kMachine, answer, {}});
        } else {
          const Chat& c = kChat[static_cast<std::size_t>(rng.below(static_cast<int>(kChat.size())))];
          d.messages.push_back({Speaker::kHuman, c.human, {}});
          d.messages.push_back({Speaker::kMachine, c.machine, {}});
        }
      }
      if (machine_output && seen.size() >= 2) break;
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<std::string> validate_dialogue(const Dialogue& d, int min_turns, int max_turns) {
  std::vector<std::string> v;
  if (d.messages.size() % 2 != 0) v.push_back(d.id + ": dialogue must end with a machine reply");
  for (std::size_t i = 0; i < d.messages.size(); ++i) {
    const Speaker want = i % 2 == 0 ? Speaker::kHuman : Speaker::kMachine;
    if (d.messages[i].speaker != want) {
      v.push_back(d.id + ": message " + std::to_string(i) + " breaks human/machine alternation");
    }
    for (const auto& a : d.messages[i].attachments) {
      if (a.modality == Modality::kText) v.push_back(d.id + ": text attachment");
      if (d.messages[i].speaker == Speaker::kMachine && a.caption.empty()) {
        v.push_back(d.id + ": machine attachment without caption");
      }
    }
  }
  if (d.turns() < min_turns || d.turns() > max_turns) {
    v.push_back(d.id + ": " + std::to_string(d.turns()) + " turns outside [" + std::to_string(min_turns) + ", " +
                std::to_string(max_turns) + "]");
  }
  return v;
}

Dataset generate_dataset(std::uint64_t seed, int pairs_per_modality, int dialogues, const EncoderConfig& enc) {
  if (pairs_per_modality < 1) throw Error(ErrorKind::kInvalidParameter, "pairs per modality must be >= 1");
  if (dialogues < 1) throw Error(ErrorKind::kInvalidParameter, "dialogue count must be >= 1");
  Dataset ds;
  ds.seed = seed;
  for (Modality m : kGeneratedModalities) {
    auto p = gen_caption_pairs(m, pairs_per_modality, seed, enc);
    ds.pairs.insert(ds.pairs.end(), p.begin(), p.end());
  }
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    ds.t2m.push_back(wrap_t2m(ds.pairs[i], static_cast<int>(i) % t2m_template_count(), seed));
  }
  ds.mosit = gen_mosit_dialogues(dialogues, seed, enc);
  return ds;
}

std::vector<CaptionPair> pairs_of(const Dataset& ds, Modality m) {
  std::vector<CaptionPair> out;
  for (const auto& p : ds.pairs) {
    if (p.modality == m) out.push_back(p);
  }
  return out;
}

// --- persistence -----------------------------------------------------------

namespace {

json pair_json(const CaptionPair& p) {
  return {{"id", p.id},          {"modality", to_string(p.modality)}, {"mode", p.mode}, {"attribute", p.attribute},
          {"latent", p.latent},  {"caption", p.caption},              {"payload", p.payload_ref}};
}

json dialogue_json(const Dialogue& d) {
  json msgs = json::array();
  for (const auto& m : d.messages) {
    json att = json::array();
    for (const auto& a : m.attachments) att.push_back(pair_json(a));
    msgs.push_back({{"role", m.speaker == Speaker::kHuman ? "human" : "machine"}, {"text", m.text}, {"attachments", att}});
  }
  return {{"id", d.id}, {"topic", d.topic}, {"messages", msgs}};
}

struct LineContext {
  std::string where;
};

template <class T>
T field(const json& j, const char* key, const LineContext& ctx) {
  if (!j.is_object() || !j.contains(key)) throw Error(ErrorKind::kParse, ctx.where + ": missing field \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::kParse, ctx.where + ": field \"" + key + "\" has the wrong type");
  }
}

CaptionPair pair_from_json(const json& j, const LineContext& ctx, const fs::path& dir) {
  CaptionPair p;
  p.id = field<std::string>(j, "id", ctx);
  auto m = modality_from_string(field<std::string>(j, "modality", ctx));
  if (!m || *m == Modality::kText) throw Error(ErrorKind::kParse, ctx.where + ": bad modality");
  p.modality = *m;
  p.mode = field<int>(j, "mode", ctx);
  p.attribute = field<int>(j, "attribute", ctx);
  p.latent = field<std::vector<double>>(j, "latent", ctx);
  p.caption = field<std::string>(j, "caption", ctx);
  p.payload_ref = field<std::string>(j, "payload", ctx);
  const fs::path blob = dir / p.payload_ref;
  if (!fs::exists(blob)) {
    throw Error(ErrorKind::kDanglingRef, ctx.where + ": payload " + p.payload_ref + " does not exist");
  }
  Blob b = read_blob(blob);
  p.payload.modality = p.modality;
  p.payload.shape = b.shape;
  p.payload.data = std::move(b.data);
  return p;
}

Dialogue dialogue_from_json(const json& j, const LineContext& ctx, const fs::path& dir) {
  Dialogue d;
  d.id = field<std::string>(j, "id", ctx);
  d.topic = field<int>(j, "topic", ctx);
  const json msgs = field<json>(j, "messages", ctx);
  if (!msgs.is_array()) throw Error(ErrorKind::kParse, ctx.where + ": messages must be an array");
  for (const auto& mj : msgs) {
    Message m;
    const auto role = field<std::string>(mj, "role", ctx);
    if (role != "human" && role != "machine") throw Error(ErrorKind::kParse, ctx.where + ": bad role " + role);
    m.speaker = role == "human" ? Speaker::kHuman : Speaker::kMachine;
    m.text = field<std::string>(mj, "text", ctx);
    const json att = field<json>(mj, "attachments", ctx);
    for (const auto& a : att) m.attachments.push_back(pair_from_json(a, ctx, dir));
    d.messages.push_back(std::move(m));
  }
  return d;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  f << text;
  if (!f) throw Error(ErrorKind::kIo, "failed writing " + path.string());
}

template <class F>
void for_each_line(const fs::path& path, F&& fn) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  std::string line;
  int no = 0;
  while (std::getline(f, line)) {
    ++no;
    if (line.empty()) continue;
    LineContext ctx{path.filename().string() + " line " + std::to_string(no)};
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::kParse, ctx.where + ": malformed record (" + e.what() + ")");
    }
    fn(j, ctx);
  }
}

void write_payload(const fs::path& dir, const CaptionPair& p, std::set<std::string>& written) {
  if (!written.insert(p.payload_ref).second) return;
  write_blob(dir / p.payload_ref, p.payload.shape, p.payload.data);
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& ds) {
  std::error_code ec;
  fs::create_directories(dir / "blobs", ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  std::set<std::string> blobs;
  std::string pairs;
  for (const auto& p : ds.pairs) {
    pairs += pair_json(p).dump() + "\n";
    write_payload(dir, p, blobs);
  }
  auto dialogues = [&](const std::vector<Dialogue>& v) {
    std::string s;
    for (const auto& d : v) {
      s += dialogue_json(d).dump() + "\n";
      for (const auto& m : d.messages) {
        for (const auto& a : m.attachments) write_payload(dir, a, blobs);
      }
    }
    return s;
  };
  write_text(dir / "pairs.jsonl", pairs);
  write_text(dir / "t2m.jsonl", dialogues(ds.t2m));
  write_text(dir / "mosit.jsonl", dialogues(ds.mosit));
  json manifest = {{"format_version", kDatasetFormatVersion},
                   {"seed", ds.seed},
                   {"counts", {{"pairs", ds.pairs.size()}, {"t2m", ds.t2m.size()}, {"mosit", ds.mosit.size()}}},
                   {"blobs", std::vector<std::string>(blobs.begin(), blobs.end())}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw Error(ErrorKind::kIo, "no dataset manifest at " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, "manifest.json: " + std::string(e.what()));
  }
  LineContext mctx{"manifest.json"};
  if (field<int>(manifest, "format_version", mctx) != kDatasetFormatVersion) {
    throw Error(ErrorKind::kVersion, "unsupported dataset format version");
  }
  for (const auto& ref : field<std::vector<std::string>>(manifest, "blobs", mctx)) {
    if (!fs::exists(dir / ref)) throw Error(ErrorKind::kDanglingRef, "manifest references missing blob " + ref);
  }
  Dataset ds;
  ds.seed = field<std::uint64_t>(manifest, "seed", mctx);
  for_each_line(dir / "pairs.jsonl", [&](const json& j, const LineContext& c) { ds.pairs.push_back(pair_from_json(j, c, dir)); });
  for_each_line(dir / "t2m.jsonl", [&](const json& j, const LineContext& c) { ds.t2m.push_back(dialogue_from_json(j, c, dir)); });
  for_each_line(dir / "mosit.jsonl",
                [&](const json& j, const LineContext& c) { ds.mosit.push_back(dialogue_from_json(j, c, dir)); });
  const json counts = field<json>(manifest, "counts", mctx);
  if (field<std::size_t>(counts, "pairs", mctx) != ds.pairs.size() ||
      field<std::size_t>(counts, "t2m", mctx) != ds.t2m.size() ||
      field<std::size_t>(counts, "mosit", mctx) != ds.mosit.size()) {
    throw Error(ErrorKind::kParse, "manifest.json: record counts disagree with the record files");
  }
  for (const auto& d : ds.t2m) {
    if (auto v = validate_dialogue(d, 1, 1); !v.empty()) throw Error(ErrorKind::kParse, v.front());
  }
  for (const auto& d : ds.mosit) {
    if (auto v = validate_dialogue(d, kMinTurns, kMaxTurns); !v.empty()) throw Error(ErrorKind::kParse, v.front());
  }
  return ds;
}

std::string dataset_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    h = fnv1a(rel.data(), rel.size(), h);
    std::ifstream in(f, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return fnv1a_hex(h);
}

}  // namespace nxgpt
