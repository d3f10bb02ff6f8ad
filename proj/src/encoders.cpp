#include "nxgpt/encoders.hpp"

#include <cmath>
#include <string>

#include "nxgpt/error.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

namespace {

std::string prefix(Modality m) { return "encoder." + std::string(to_string(m)); }

// Extracts p x p x C patches from an S x S x C frame starting at data offset.
void frame_patches(const float* frame, int size, int channels, int patch, Mat& out, Eigen::Index row0) {
  const int per_side = size / patch;
  for (int py = 0; py < per_side; ++py) {
    for (int px = 0; px < per_side; ++px) {
      const Eigen::Index row = row0 + py * per_side + px;
      Eigen::Index col = 0;
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          const int yy = py * patch + y;
          const int xx = px * patch + x;
          for (int c = 0; c < channels; ++c) {
            out(row, col++) = frame[(yy * size + xx) * channels + c];
          }
        }
      }
    }
  }
}

}  // namespace

void ToyEncoders::register_params(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  ToyEncoders shape_only(store, cfg);
  for (Modality m : kGeneratedModalities) {
    const int pd = shape_only.patch_dim(m);
    store.add_normal(prefix(m) + ".patch_w", pd, cfg.feature_dim, 1.0 / std::sqrt(static_cast<double>(pd)),
                     Role::kFrozen, rng);
    store.add_normal(prefix(m) + ".pos", shape_only.token_count(m), cfg.feature_dim, 0.5, Role::kFrozen, rng);
  }
}

int ToyEncoders::token_count(Modality m) const {
  const auto& e = cfg_.encoder;
  switch (m) {
    case Modality::kImage: return (e.image_size / e.image_patch) * (e.image_size / e.image_patch);
    case Modality::kAudio: return e.audio_length / e.audio_window;
    case Modality::kVideo: return e.video_frames * (e.video_size / e.video_patch) * (e.video_size / e.video_patch);
    case Modality::kText: break;
  }
  throw Error(ErrorKind::kWrongModality, "text has no encoder");
}

int ToyEncoders::patch_dim(Modality m) const {
  const auto& e = cfg_.encoder;
  switch (m) {
    case Modality::kImage: return e.image_patch * e.image_patch * e.image_channels;
    case Modality::kAudio: return e.audio_window;
    case Modality::kVideo: return e.video_patch * e.video_patch * e.image_channels;
    case Modality::kText: break;
  }
  throw Error(ErrorKind::kWrongModality, "text has no encoder");
}

std::vector<std::uint32_t> ToyEncoders::expected_shape(Modality m) const {
  const auto& e = cfg_.encoder;
  const auto u = [](int v) { return static_cast<std::uint32_t>(v); };
  switch (m) {
    case Modality::kImage: return {u(e.image_size), u(e.image_size), u(e.image_channels)};
    case Modality::kAudio: return {u(e.audio_length)};
    case Modality::kVideo: return {u(e.video_frames), u(e.video_size), u(e.video_size), u(e.image_channels)};
    case Modality::kText: break;
  }
  throw Error(ErrorKind::kWrongModality, "text has no encoder");
}

Mat ToyEncoders::patches(const RawSample& s) const {
  if (s.modality == Modality::kText) throw Error(ErrorKind::kWrongModality, "text input cannot be encoded");
  const auto expect = expected_shape(s.modality);
  if (s.shape != expect) {
    throw Error(ErrorKind::kInvalidInput, std::string(to_string(s.modality)) + " payload has unexpected shape");
  }
  std::size_t n = 1;
  for (auto d : s.shape) n *= d;
  if (s.data.size() != n) throw Error(ErrorKind::kInvalidInput, "payload size disagrees with its shape");
  for (float v : s.data) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kInvalidInput, "payload contains a non-finite value");
  }
  const auto& e = cfg_.encoder;
  Mat out(token_count(s.modality), patch_dim(s.modality));
  switch (s.modality) {
    case Modality::kImage:
      frame_patches(s.data.data(), e.image_size, e.image_channels, e.image_patch, out, 0);
      break;
    case Modality::kAudio:
      for (Eigen::Index r = 0; r < out.rows(); ++r) {
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
          out(r, c) = s.data[static_cast<std::size_t>(r * out.cols() + c)];
        }
      }
      break;
    case Modality::kVideo: {
      const int per_frame = (e.video_size / e.video_patch) * (e.video_size / e.video_patch);
      const std::size_t frame_len = static_cast<std::size_t>(e.video_size) * e.video_size * e.image_channels;
      for (int f = 0; f < e.video_frames; ++f) {
        frame_patches(s.data.data() + f * frame_len, e.video_size, e.image_channels, e.video_patch, out,
                      f * per_frame);
      }
      break;
    }
    case Modality::kText: break;
  }
  return out;
}

ModalityFeatureBlock ToyEncoders::encode(const RawSample& sample) const {
  Mat p = patches(sample);
  const std::string pre = prefix(sample.modality);
  ModalityFeatureBlock block;
  block.modality = sample.modality;
  block.features = p * store_->value(pre + ".patch_w") + store_->value(pre + ".pos");
  return block;
}

}  // namespace nxgpt
