#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "oaid/augment.hpp"
#include "oaid/corpus.hpp"
#include "oaid/detector.hpp"
#include "oaid/log.hpp"
#include "oaid/optimizer.hpp"
#include "oaid/parallel.hpp"

namespace oaid {

struct TrainConfig {
  std::size_t epochs = 3;  // per stage
  std::size_t batch_size = 16;
  AugmentConfig augment = AugmentConfig::desk();
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs per stage must be at least 1");
    if (batch_size < 2 || batch_size % 2 != 0) throw ValidationError("batch size must be even and at least 2");
    if (!(adam.learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      throw ValidationError("Adam betas must lie in [0,1)");
    augment.validate();
  }
};

inline nlohmann::json augment_to_json(const AugmentConfig& a) {
  return {{"crop_size", a.crop_size},
          {"p_blur", a.p_blur},
          {"p_gray", a.p_gray},
          {"p_watermark", a.p_watermark},
          {"blur_sigma_min", a.blur_sigma_min},
          {"blur_sigma_max", a.blur_sigma_max},
          {"watermark_payload", a.payload.bits},
          {"watermark_step", a.watermark_step}};
}

// Missing keys keep the values already in `a`.
inline AugmentConfig augment_from_json(const nlohmann::json& j, AugmentConfig a = AugmentConfig::desk()) {
  a.crop_size = j.value("crop_size", a.crop_size);
  a.p_blur = j.value("p_blur", a.p_blur);
  a.p_gray = j.value("p_gray", a.p_gray);
  a.p_watermark = j.value("p_watermark", a.p_watermark);
  a.blur_sigma_min = j.value("blur_sigma_min", a.blur_sigma_min);
  a.blur_sigma_max = j.value("blur_sigma_max", a.blur_sigma_max);
  a.payload.bits = j.value("watermark_payload", a.payload.bits);
  a.watermark_step = j.value("watermark_step", a.watermark_step);
  a.validate();
  return a;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.adam.learning_rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"seed", c.seed},
          {"augment", augment_to_json(c.augment)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam.learning_rate = j.value("learning_rate", c.adam.learning_rate);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"), c.augment);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Pools and sampling

struct SampleRef {
  const ImageBuffer* image = nullptr;
  std::string source_id;
  std::size_t index = 0;  // position within the source's train split
};

struct TrainingPool {
  std::string real_id;
  std::vector<std::string> fake_ids;  // cumulative, release order
  std::vector<SampleRef> real;
  std::vector<SampleRef> fake;

  // Real source plus generated stages 1..k, train splits.
  static TrainingPool cumulative(const Corpus& corpus, const Timeline& timeline, std::size_t k) {
    if (k < 1 || k > timeline.size())
      throw ValidationError("stage " + std::to_string(k) + " outside timeline of " + std::to_string(timeline.size()));
    TrainingPool pool;
    pool.real_id = timeline.real.id;
    auto add = [&](const GeneratorSource& s, std::vector<SampleRef>& into) {
      const auto& imgs = corpus.images(s.id, Split::train);
      for (std::size_t i = 0; i < imgs.size(); ++i) into.push_back({&imgs[i], s.id, i});
    };
    add(timeline.real, pool.real);
    for (std::size_t i = 0; i < k; ++i) {
      pool.fake_ids.push_back(timeline.generated[i].id);
      add(timeline.generated[i], pool.fake);
    }
    return pool;
  }

  std::vector<std::string> cumulative_ids() const {
    std::vector<std::string> ids{real_id};
    ids.insert(ids.end(), fake_ids.begin(), fake_ids.end());
    return ids;
  }
};

struct BatchItem {
  bool fake = false;
  std::size_t index = 0;  // into pool.real or pool.fake
};

using Batch = std::vector<BatchItem>;

// One epoch of batches, each half real and half synthetic. Both halves are
// uniform draws with replacement from their class, so a synthetic source is
// drawn in proportion to its sample count. The epoch has enough batches to
// draw max(class sizes) samples per class.
inline std::vector<Batch> class_balanced_batches(const TrainingPool& pool, std::size_t batch_size, Rng& rng) {
  if (pool.real.empty() || pool.fake.empty())
    throw ValidationError("class-balanced sampling needs both real and synthetic samples");
  if (batch_size < 2 || batch_size % 2 != 0) throw ValidationError("batch size must be even and at least 2");
  const std::size_t half = batch_size / 2;
  const std::size_t largest = std::max(pool.real.size(), pool.fake.size());
  const std::size_t count = (largest + half - 1) / half;
  std::vector<Batch> batches(count);
  for (auto& b : batches) {
    b.reserve(batch_size);
    for (std::size_t i = 0; i < half; ++i) b.push_back({false, uniform_index(rng, 0, pool.real.size() - 1)});
    for (std::size_t i = 0; i < half; ++i) b.push_back({true, uniform_index(rng, 0, pool.fake.size() - 1)});
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Training

struct StageStats {
  std::size_t stage = 0;
  std::vector<double> epoch_losses;
};

// Continues `model` from its current weights on the cumulative pool for stage
// k = |pool.fake_ids|. The model must be at stage k - 1. Adam moments start
// fresh each stage, so a stage depends only on the incoming weights.
inline StageStats train_stage(DetectorModel& model, const TrainingPool& pool, const TrainConfig& config,
                              const EventLog& log = {}) {
  config.validate();
  require_head(model, HeadKind::whole_image, "train_stage");
  const std::size_t k = pool.fake_ids.size();
  if (k == 0) throw ValidationError("training pool has no generated sources");
  if (model.stage + 1 != k)
    throw ValidationError("model is at stage " + std::to_string(model.stage) + " but the pool is for stage " +
                          std::to_string(k) + "; stages cannot be skipped");
  OptimizerState<float> opt{config.adam, {}, {}, 0};
  StageStats stats{k, {}};
  std::vector<ImageBuffer> inputs(config.batch_size);
  std::vector<int> labels(config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng sampler = derive_rng(config.seed, "sampler", k, epoch);
    const auto batches = class_balanced_batches(pool, config.batch_size, sampler);
    // Augmentation streams are keyed by a global epoch counter so repeated
    // stages do not replay the same crops.
    const std::size_t global_epoch = (k - 1) * config.epochs + epoch;
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
      parallel_for(batch.size(), config.threads, [&](std::size_t i) {
        const auto& ref = batch[i].fake ? pool.fake[batch[i].index] : pool.real[batch[i].index];
        Rng rng = derive_rng(config.seed, ref.source_id, "train", ref.index, global_epoch);
        inputs[i] = apply_train_augment(*ref.image, config.augment, rng);
        labels[i] = batch[i].fake ? 1 : 0;
      });
      const auto trace = forward<float>(model.layers, model.params, images_to_tensor(inputs, model.input_filter));
      const auto loss = cross_entropy_loss<float>(trace.output(), labels);
      const auto grads = backward(trace, model.params, loss.grad, false);
      optimizer_step(opt, model.params, grads.params);
      loss_sum += loss.value;
    }
    stats.epoch_losses.push_back(loss_sum / static_cast<double>(batches.size()));
    log.emit("epoch_end", {{"stage", k}, {"epoch", epoch + 1}, {"batches", batches.size()},
                           {"mean_loss", stats.epoch_losses.back()}});
  }
  model.stage = k;
  return stats;
}

// ---------------------------------------------------------------------------
// Stage checkpoints

struct StageCheckpoint {
  std::size_t stage = 0;
  std::string source_id;                    // generated source added at this stage
  std::vector<std::string> cumulative_ids;  // real source first, then stages 1..k
  DetectorModel model;
};

inline void save_checkpoint(const StageCheckpoint& ckpt, const std::filesystem::path& path) {
  if (ckpt.model.stage != ckpt.stage) throw ValidationError("checkpoint stage disagrees with its model");
  DetectorModel m = ckpt.model;
  m.metadata["stage_source"] = ckpt.source_id;
  m.metadata["cumulative_ids"] = ckpt.cumulative_ids;
  save_model(m, path);
}

inline StageCheckpoint load_checkpoint(const std::filesystem::path& path) {
  StageCheckpoint c;
  c.model = load_model(path);
  const auto& meta = c.model.metadata;
  if (!meta.contains("stage_source") || !meta.contains("cumulative_ids"))
    throw IoError("checkpoint '" + path.string() + "' carries no stage metadata");
  c.stage = c.model.stage;
  c.source_id = meta.at("stage_source").get<std::string>();
  c.cumulative_ids = meta.at("cumulative_ids").get<std::vector<std::string>>();
  if (c.cumulative_ids.size() != c.stage + 1)
    throw IoError("checkpoint '" + path.string() + "' lists " + std::to_string(c.cumulative_ids.size()) +
                  " cumulative sources for stage " + std::to_string(c.stage));
  return c;
}

inline std::string checkpoint_filename(std::size_t stage, const std::string& source_id) {
  return "stage_" + std::to_string(stage) + "_" + source_id + ".ckpt";
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Identifies everything that determines a run's checkpoints.
inline std::string run_config_hash(const TrainConfig& config, const Manifest& manifest) {
  const nlohmann::json j{{"train", train_config_to_json(config)}, {"manifest", manifest_to_json(manifest)}};
  return hex64(fnv1a64(j.dump()));
}

// Trains stages 1..N in release order, each from the previous stage's weights.
// With a run directory, every stage is persisted as it completes and a rerun
// reuses the leading run of intact checkpoints, retraining from the first
// missing one onward.
inline std::vector<StageCheckpoint> run_online(const Timeline& timeline, const Corpus& corpus,
                                               const TrainConfig& config,
                                               const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                                               const EventLog& log = {}) {
  namespace fs = std::filesystem;
  config.validate();
  const std::string hash = run_config_hash(config, corpus.manifest());
  if (run_dir) {
    const auto manifest_path = *run_dir / "run_manifest.json";
    if (fs::exists(manifest_path)) {
      const auto existing = nlohmann::json::parse(detail::read_all(manifest_path));
      if (existing.value("config_hash", "") != hash)
        throw ValidationError("run directory '" + run_dir->string() + "' was created with a different config");
    }
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& s : timeline.generated) ids.push_back(s.id);
    const nlohmann::json manifest{{"config_hash", hash},
                                  {"seed", config.seed},
                                  {"config", train_config_to_json(config)},
                                  {"real_source", timeline.real.id},
                                  {"sources", ids}};
    detail::write_atomic(manifest_path, manifest.dump(2) + "\n");
  }

  std::vector<StageCheckpoint> out;
  DetectorModel model = build_whole_image_net(corpus.manifest().image_size, derive_seed(config.seed, "model"));
  model.metadata["provenance"] = "online";
  bool resuming = true;
  for (std::size_t k = 1; k <= timeline.size(); ++k) {
    const auto& source = timeline.at_stage(k);
    const TrainingPool pool = TrainingPool::cumulative(corpus, timeline, k);
    std::optional<fs::path> path;
    if (run_dir) path = *run_dir / checkpoint_filename(k, source.id);
    if (resuming && path && fs::exists(*path)) {
      StageCheckpoint ckpt = load_checkpoint(*path);
      if (ckpt.stage == k && ckpt.cumulative_ids == pool.cumulative_ids()) {
        log.emit("stage_resumed", {{"stage", k}, {"source", source.id}, {"path", path->string()}});
        model = ckpt.model;
        out.push_back(std::move(ckpt));
        continue;
      }
    }
    resuming = false;
    log.emit("stage_start", {{"stage", k}, {"source", source.id}, {"cumulative_sources", pool.cumulative_ids()},
                             {"real_samples", pool.real.size()}, {"fake_samples", pool.fake.size()}});
    const auto stats = train_stage(model, pool, config, log);
    StageCheckpoint ckpt{k, source.id, pool.cumulative_ids(), model};
    if (path) save_checkpoint(ckpt, *path);
    log.emit("stage_end", {{"stage", k}, {"source", source.id}, {"cumulative_sources", pool.cumulative_ids()},
                           {"epoch_losses", stats.epoch_losses}});
    out.push_back(std::move(ckpt));
  }
  return out;
}

}  // namespace oaid
