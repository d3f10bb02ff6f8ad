#include "nxgpt/model.hpp"

#include <algorithm>

#include "nxgpt/checkpoint.hpp"
#include "nxgpt/error.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

namespace {

ModelConfig checked(const ModelConfig& cfg) {
  const ValidationReport report = validate_config(cfg);
  if (!report.ok()) throw Error(ErrorKind::kInvalidConfig, report.violations.front());
  return cfg;
}

// Every component draws its initial weights from its own stream, so sizing
// one component never changes another's initialisation.
void register_all(ParamStore& store, const ModelConfig& cfg) {
  Rng enc = Rng::derive(cfg.seed, 1);
  Rng grp = Rng::derive(cfg.seed, 2);
  Rng llm = Rng::derive(cfg.seed, 3);
  Rng out = Rng::derive(cfg.seed, 4);
  Rng dif = Rng::derive(cfg.seed, 5);
  Rng con = Rng::derive(cfg.seed, 6);
  ToyEncoders::register_params(store, cfg, enc);
  GroupingProjector::register_params(store, cfg, grp);
  TinyLlm::register_params(store, cfg, llm);
  OutputProjection::register_params(store, cfg, out);
  ToyDiffusion::register_params(store, cfg, dif);
  CaptionConditioner::register_params(store, cfg, con);
}

}  // namespace

Model::Model(const ModelConfig& cfg)
    : cfg_(checked(cfg)),
      encoders_(store_, cfg_),
      grouping_(store_, cfg_),
      llm_(store_, cfg_),
      outproj_(store_, cfg_),
      diffusion_(store_, cfg_),
      conditioner_(store_, cfg_) {
  register_all(store_, cfg_);
}

bool Model::has(const std::string& step) const {
  return std::find(provenance_.begin(), provenance_.end(), step) != provenance_.end();
}

void Model::mark(const std::string& step) {
  if (!has(step)) provenance_.push_back(step);
  sync_flags();
}

void Model::sync_flags() {
  if (has(kStepDiffusionPretrain)) {
    for (Modality m : kGeneratedModalities) diffusion_.mark_trained(m);
  }
}

void Model::save(const std::filesystem::path& dir) const { save_checkpoint(dir, store_, cfg_, provenance_); }

std::unique_ptr<Model> Model::load(const std::filesystem::path& dir) {
  const CheckpointManifest manifest = read_manifest(dir);
  auto model = std::make_unique<Model>(config_from_json(manifest.config));
  load_checkpoint(dir, model->store_);
  model->provenance_ = manifest.provenance;
  model->sync_flags();
  return model;
}

void Model::import_from(const std::filesystem::path& dir, const std::function<bool(const std::string&)>& pred,
                        const std::vector<std::string>& steps) {
  const CheckpointManifest manifest = read_manifest(dir);
  for (const auto& step : steps) {
    if (!manifest.has(step)) {
      throw Error(ErrorKind::kDependency, dir.string() + " has not completed step " + step);
    }
  }
  for (const auto& r : manifest.tensors) {
    if (!pred(r.name) || !store_.contains(r.name)) continue;
    const Parameter& p = store_.at(r.name);
    const Mat v = from_blob(read_blob(dir / r.blob));
    if (v.rows() != p.value().rows() || v.cols() != p.value().cols()) continue;
    p.mutable_value() = v;
  }
  for (const auto& step : steps) mark(step);
}

}  // namespace nxgpt
