#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "oaid.hpp"

namespace oaid::cli {

// Everything a command needs. Loaded from --config JSON, then overridden by
// command-line flags, then validated before any output is touched.
struct RunConfig {
  std::optional<std::filesystem::path> manifest;  // default manifest when absent
  std::optional<std::filesystem::path> corpus;    // materialized corpus root
  std::optional<std::size_t> image_size;
  std::optional<std::size_t> crop_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::size_t threads = 1;

  TrainConfig train;

  PixelDataConfig pixel;
  std::vector<PixelSourceSpec> pixel_sources = default_pixel_sources();
  SplitCounts pixel_counts{200, 20, 100};
  PixelTrainConfig pixel_train;
  double pixel_threshold = 0.5;
};

namespace detail_cfg {

inline MaskSpec mask_from_json(const nlohmann::json& j, MaskSpec m) {
  m.coverage_lo = j.value("coverage_lo", m.coverage_lo);
  m.coverage_hi = j.value("coverage_hi", m.coverage_hi);
  m.strokes_min = j.value("strokes_min", m.strokes_min);
  m.strokes_max = j.value("strokes_max", m.strokes_max);
  m.width_lo = j.value("width_lo", m.width_lo);
  m.width_hi = j.value("width_hi", m.width_hi);
  m.weight_polyline = j.value("weight_polyline", m.weight_polyline);
  m.weight_ellipse = j.value("weight_ellipse", m.weight_ellipse);
  m.weight_rectangle = j.value("weight_rectangle", m.weight_rectangle);
  m.max_attempts = j.value("max_attempts", m.max_attempts);
  return m;
}

inline CutMixSpec cutmix_from_json(const nlohmann::json& j, CutMixSpec c) {
  c.blocks_min = j.value("blocks_min", c.blocks_min);
  c.blocks_max = j.value("blocks_max", c.blocks_max);
  c.side_lo = j.value("side_lo", c.side_lo);
  c.side_hi = j.value("side_hi", c.side_hi);
  c.p_swap = j.value("p_swap", c.p_swap);
  return c;
}

}  // namespace detail_cfg

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
    if (j.contains("corpus")) c.corpus = j.at("corpus").get<std::string>();
    if (j.contains("image_size")) c.image_size = j.at("image_size").get<std::size_t>();
    if (j.contains("crop_size")) c.crop_size = j.at("crop_size").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    c.threads = j.value("threads", c.threads);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("pixel")) {
      const auto& p = j.at("pixel");
      c.pixel.image_size = p.value("image_size", c.pixel.image_size);
      c.pixel.noise_amplitude = p.value("noise_amplitude", c.pixel.noise_amplitude);
      if (p.contains("mask")) c.pixel.mask = detail_cfg::mask_from_json(p.at("mask"), c.pixel.mask);
      if (p.contains("cutmix")) c.pixel.cutmix = detail_cfg::cutmix_from_json(p.at("cutmix"), c.pixel.cutmix);
      if (p.contains("sources")) {
        c.pixel_sources.clear();
        for (const auto& s : p.at("sources"))
          c.pixel_sources.push_back({s.at("id").get<std::string>(), fingerprint_from_json(s.at("fingerprint"))});
      }
      if (p.contains("counts")) {
        const auto& n = p.at("counts");
        c.pixel_counts = {n.value("train", c.pixel_counts.train), n.value("val", c.pixel_counts.val),
                          n.value("test", c.pixel_counts.test)};
      }
      c.pixel_train.epochs = p.value("epochs", c.pixel_train.epochs);
      c.pixel_train.batch_size = p.value("batch_size", c.pixel_train.batch_size);
      c.pixel_train.adam.learning_rate = p.value("learning_rate", c.pixel_train.adam.learning_rate);
      c.pixel_threshold = p.value("threshold", c.pixel_threshold);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

// Resolves the manifest the config points at, with desk-scale overrides.
inline Manifest resolve_manifest(const RunConfig& c) {
  Manifest m;
  if (c.manifest) {
    if (!std::filesystem::exists(*c.manifest))
      throw ValidationError("manifest '" + c.manifest->string() + "' does not exist");
    m = load_manifest(*c.manifest);
  } else {
    m = default_manifest();
  }
  if (c.corpus) {
    const auto resolved = *c.corpus / "manifest.json";
    if (!std::filesystem::exists(resolved))
      throw ValidationError("corpus '" + c.corpus->string() + "' has no manifest.json");
    if (!c.manifest) m = load_manifest(resolved);
  }
  if (c.image_size) m.image_size = *c.image_size;
  m.validate();
  return m;
}

inline TrainConfig resolve_train(const RunConfig& c) {
  TrainConfig t = c.train;
  if (c.seed) t.seed = *c.seed;
  if (c.crop_size) t.augment.crop_size = *c.crop_size;
  t.threads = c.threads;
  t.validate();
  return t;
}

inline void require_seed(const RunConfig& c, const std::string& command) {
  if (!c.seed) throw ValidationError(command + " needs a seed (--seed or \"seed\" in the config)");
}

inline void require_out(const RunConfig& c, const std::string& command) {
  if (!c.out) throw ValidationError(command + " needs an output location (--out or \"out\" in the config)");
}

}  // namespace oaid::cli
