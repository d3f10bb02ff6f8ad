#include "nxgpt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "nxgpt/error.hpp"

namespace nxgpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'N', 'X', 'G', 'P', 'T', 'B', 'L', 'B'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace

std::size_t Blob::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<std::uint8_t> encode_blob(std::span<const std::uint32_t> shape, std::span<const float> data) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  if (n != data.size()) throw Error(ErrorKind::kShapeMismatch, "blob payload does not match shape");
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.reserve(8 + 4 + 4 * shape.size() + 4 * data.size());
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(out, d);
  for (float f : data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Blob decode_blob(std::span<const std::uint8_t> bytes, const std::string& what) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw Error(ErrorKind::kCorruptCheckpoint, what + ": bad magic or header");
  }
  Blob b;
  const std::uint32_t rank = get_u32(bytes, 8);
  std::size_t at = 12;
  if (bytes.size() < at + 4ull * rank) throw Error(ErrorKind::kCorruptCheckpoint, what + ": truncated header");
  for (std::uint32_t i = 0; i < rank; ++i, at += 4) b.shape.push_back(get_u32(bytes, at));
  const std::size_t n = b.element_count();
  if (bytes.size() - at != 4 * n) {
    throw Error(ErrorKind::kCorruptCheckpoint, what + ": payload is " + std::to_string(bytes.size() - at) +
                                                   " bytes, expected " + std::to_string(4 * n));
  }
  b.data.resize(n);
  for (std::size_t i = 0; i < n; ++i, at += 4) b.data[i] = std::bit_cast<float>(get_u32(bytes, at));
  return b;
}

void write_blob(const fs::path& path, std::span<const std::uint32_t> shape, std::span<const float> data) {
  const auto bytes = encode_blob(shape, data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

Blob read_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_blob(bytes, path.string());
}

Blob to_blob(const Mat& m) {
  Blob b;
  b.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  b.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) b.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return b;
}

Mat from_blob(const Blob& b) {
  if (b.shape.size() != 2) throw Error(ErrorKind::kShapeMismatch, "tensor blobs must be rank 2");
  Mat m(b.shape[0], b.shape[1]);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b.data[static_cast<std::size_t>(i)];
  return m;
}

bool CheckpointManifest::has(const std::string& step) const {
  return std::find(provenance.begin(), provenance.end(), step) != provenance.end();
}

json to_json(const CheckpointManifest& m) {
  json tensors = json::array();
  for (const auto& t : m.tensors) {
    tensors.push_back({{"name", t.name},
                       {"module", t.module},
                       {"shape", t.shape},
                       {"dtype", t.dtype},
                       {"role", std::string(to_string(t.role))},
                       {"blob", t.blob}});
  }
  return json{{"format_version", m.format_version},
              {"config", m.config},
              {"provenance", m.provenance},
              {"tensors", tensors}};
}

CheckpointManifest manifest_from_json(const json& j) {
  CheckpointManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kCheckpointFormatVersion) {
      throw Error(ErrorKind::kVersion, "checkpoint format_version " + std::to_string(m.format_version) +
                                           " (supported: " + std::to_string(kCheckpointFormatVersion) + ")");
    }
    m.config = j.at("config");
    m.provenance = j.at("provenance").get<std::vector<std::string>>();
    std::set<std::string> seen;
    for (const auto& t : j.at("tensors")) {
      TensorRecord r;
      r.name = t.at("name").get<std::string>();
      r.module = t.at("module").get<std::string>();
      r.shape = t.at("shape").get<std::vector<std::uint32_t>>();
      r.dtype = t.at("dtype").get<std::string>();
      auto role = role_from_string(t.at("role").get<std::string>());
      if (!role) throw Error(ErrorKind::kCorruptCheckpoint, "tensor " + r.name + ": bad role");
      r.role = *role;
      r.blob = t.at("blob").get<std::string>();
      if (r.dtype != "float32") throw Error(ErrorKind::kCorruptCheckpoint, "tensor " + r.name + ": dtype " + r.dtype);
      if (!seen.insert(r.name).second) throw Error(ErrorKind::kCorruptCheckpoint, "duplicate tensor " + r.name);
      m.tensors.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruptCheckpoint, std::string("manifest: ") + e.what());
  }
  return m;
}

CheckpointManifest save_checkpoint(const fs::path& dir, const ParamStore& store, const ModelConfig& cfg,
                                   const std::vector<std::string>& provenance) {
  fs::create_directories(dir / "blobs");
  CheckpointManifest m;
  m.config = to_json(cfg);
  m.provenance = provenance;
  for (const auto& p : store.params()) {
    TensorRecord r;
    r.name = p.name;
    r.module = p.module();
    r.shape = {static_cast<std::uint32_t>(p.value().rows()), static_cast<std::uint32_t>(p.value().cols())};
    r.role = p.role;
    r.blob = "blobs/" + p.name + ".bin";
    const Blob b = to_blob(p.value());
    write_blob(dir / r.blob, b.shape, b.data);
    m.tensors.push_back(std::move(r));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorKind::kIo, "cannot write manifest in " + dir.string());
  out << to_json(m).dump(2) << "\n";
  return m;
}

CheckpointManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorKind::kIo, "no manifest.json in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruptCheckpoint, std::string("manifest: ") + e.what());
  }
  return manifest_from_json(j);
}

CheckpointManifest load_checkpoint(const fs::path& dir, ParamStore& store) {
  CheckpointManifest m = read_manifest(dir);
  std::set<std::string> listed;
  std::vector<std::pair<const Parameter*, Mat>> staged;
  for (const auto& r : m.tensors) {
    if (!store.contains(r.name)) {
      throw Error(ErrorKind::kShapeMismatch, "checkpoint tensor " + r.name + " does not exist in the target model");
    }
    const Parameter& p = store.at(r.name);
    const std::vector<std::uint32_t> expect = {static_cast<std::uint32_t>(p.value().rows()),
                                               static_cast<std::uint32_t>(p.value().cols())};
    if (r.shape != expect) throw Error(ErrorKind::kShapeMismatch, "tensor " + r.name + " has a different shape");
    Blob b = read_blob(dir / r.blob);
    if (b.shape != r.shape) throw Error(ErrorKind::kCorruptCheckpoint, "blob shape disagrees with manifest for " + r.name);
    staged.emplace_back(&p, from_blob(b));
    listed.insert(r.name);
  }
  for (const auto& p : store.params()) {
    if (!listed.count(p.name)) throw Error(ErrorKind::kShapeMismatch, "checkpoint lacks tensor " + p.name);
  }
  // Nothing is written into the store unless the whole checkpoint is valid.
  for (auto& [p, value] : staged) p->mutable_value() = std::move(value);
  return m;
}

}  // namespace nxgpt
