#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nxgpt/config.hpp"
#include "nxgpt/encoders.hpp"

namespace nxgpt {

class Rng;

// Toy latent spaces shared with the diffusion decoders. Every modality is
// a Gaussian mixture with named modes:
//   image (2-D point): left, right, top, bottom
//   audio (1-D pitch): low, mid, high
//   video (4-D start/end point): left, right, up, down
inline constexpr double kModeStd = 0.3;

const std::vector<std::string>& mode_names(Modality m);
// Attribute that changes the payload but not the latent: colour for image
// and video, loudness for audio.
const std::vector<std::string>& attribute_names(Modality m);
std::vector<double> mode_center(Modality m, int mode);
// Index of the centre nearest to the latent (Euclidean).
int nearest_mode(Modality m, const std::vector<double>& latent);

// Grammar: "a red dot at left", "a loud low tone", "a blue dot moving up".
std::string describe(Modality m, int mode, int attribute);

RawSample render_payload(Modality m, const std::vector<double>& latent, int attribute, const EncoderConfig& enc);

struct CaptionPair {
  std::string id;
  Modality modality = Modality::kImage;
  int mode = 0;
  int attribute = 0;
  std::vector<double> latent;
  std::string caption;
  RawSample payload;
  std::string payload_ref;  // blob path relative to the dataset directory

  Mat latent_row() const;
};

CaptionPair make_pair(Modality m, const std::string& id, Rng& rng, const EncoderConfig& enc = {});
std::vector<CaptionPair> gen_caption_pairs(Modality m, int n, std::uint64_t seed, const EncoderConfig& enc = {});

enum class Speaker { kHuman, kMachine };

struct Message {
  Speaker speaker = Speaker::kHuman;
  std::string text;
  // Human side: inputs to understand. Machine side: outputs to generate,
  // each announced by its gold signal run after the text.
  std::vector<CaptionPair> attachments;
};

struct Dialogue {
  std::string id;
  int topic = 0;
  std::vector<Message> messages;

  // One turn is a human message and the machine reply.
  int turns() const { return static_cast<int>(messages.size() / 2); }
};

int t2m_template_count();
// Single-turn instruction: the human asks for the caption's content, the
// machine acknowledges and emits the signal run.
Dialogue wrap_t2m(const CaptionPair& pair, int template_id, std::uint64_t seed);

inline constexpr int kMinTurns = 3;
inline constexpr int kMaxTurns = 7;

// Modality-switching dialogues: 3-7 turns mixing chit-chat, requests to
// generate and requests to describe an attached input; at least two
// modalities and at least one machine-side attachment per dialogue.
std::vector<Dialogue> gen_mosit_dialogues(int n, std::uint64_t seed, const EncoderConfig& enc = {});

// Empty when valid: roles alternate from human, turn count in range, every
// machine attachment has a caption.
std::vector<std::string> validate_dialogue(const Dialogue& d, int min_turns, int max_turns);

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<CaptionPair> pairs;
  std::vector<Dialogue> t2m;
  std::vector<Dialogue> mosit;
};

inline constexpr int kDatasetFormatVersion = 1;

// pairs_per_modality pairs of each generated modality, one T2M wrapping per
// pair, and `dialogues` MosIT dialogues.
Dataset generate_dataset(std::uint64_t seed, int pairs_per_modality, int dialogues, const EncoderConfig& enc = {});

// Layout: manifest.json, pairs.jsonl, t2m.jsonl, mosit.jsonl, blobs/.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
// Malformed lines raise kParse naming file and line; missing blobs raise
// kDanglingRef.
Dataset load_dataset(const std::filesystem::path& dir);
// FNV-1a over every file of the dataset directory in name order.
std::string dataset_hash(const std::filesystem::path& dir);

// Concatenated pairs that have the given modality.
std::vector<CaptionPair> pairs_of(const Dataset& ds, Modality m);

std::string fnv1a_hex(std::uint64_t h);
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL);

}  // namespace nxgpt
