#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "oaid/corpus.hpp"
#include "oaid/detector.hpp"
#include "oaid/error.hpp"
#include "oaid/imaging.hpp"
#include "oaid/log.hpp"
#include "oaid/optimizer.hpp"
#include "oaid/parallel.hpp"
#include "oaid/png_io.hpp"
#include "oaid/rng.hpp"

namespace oaid {

// ---------------------------------------------------------------------------
// Stroke masks

struct MaskSpec {
  double coverage_lo = 0.15;
  double coverage_hi = 0.35;
  std::size_t strokes_min = 3;
  std::size_t strokes_max = 8;
  double width_lo = 0.03;  // stroke width as a fraction of the short side
  double width_hi = 0.12;
  // Relative frequency of each element kind.
  double weight_polyline = 0.6;
  double weight_ellipse = 0.2;
  double weight_rectangle = 0.2;
  std::size_t max_attempts = 20;

  void validate() const {
    if (!(coverage_lo > 0.0 && coverage_lo < coverage_hi && coverage_hi < 1.0))
      throw ValidationError("mask coverage range must satisfy 0 < lo < hi < 1");
    if (strokes_min < 1 || strokes_max < strokes_min) throw ValidationError("mask stroke count range is invalid");
    if (!(width_lo > 0.0 && width_hi >= width_lo)) throw ValidationError("mask stroke width range is invalid");
    if (!(weight_polyline >= 0 && weight_ellipse >= 0 && weight_rectangle >= 0) ||
        weight_polyline + weight_ellipse + weight_rectangle <= 0.0)
      throw ValidationError("mask shape weights must be non-negative with a positive sum");
    if (max_attempts < 1) throw ValidationError("mask max_attempts must be positive");
  }
};

struct StrokeMask {
  Plane plane;  // 1 = generated pixel
  double coverage = 0.0;
};

inline double plane_mean(const Plane& p) {
  double acc = 0.0;
  for (double v : p.values) acc += v;
  return acc / static_cast<double>(p.values.size());
}

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  const double t = len2 > 0.0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
  const double cx = ax + t * dx - px, cy = ay + t * dy - py;
  return std::sqrt(cx * cx + cy * cy);
}

// Polyline of 3-6 vertices with round caps: every pixel centre within half the
// stroke width of a segment is set.
inline void draw_polyline(Plane& p, const MaskSpec& spec, Rng& rng) {
  const double h = static_cast<double>(p.height), w = static_cast<double>(p.width);
  const double half = uniform(rng, spec.width_lo, spec.width_hi) * std::min(h, w) / 2.0;
  const std::size_t n = uniform_index(rng, 3, 6);
  std::vector<std::pair<double, double>> pts(n);
  for (auto& [x, y] : pts) {
    x = uniform(rng, 0.0, w);
    y = uniform(rng, 0.0, h);
  }
  for (std::size_t s = 0; s + 1 < n; ++s) {
    const auto [ax, ay] = pts[s];
    const auto [bx, by] = pts[s + 1];
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::min(ay, by) - half));
    const auto y1 = static_cast<std::size_t>(std::clamp(std::max(ay, by) + half + 1.0, 0.0, h));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::min(ax, bx) - half));
    const auto x1 = static_cast<std::size_t>(std::clamp(std::max(ax, bx) + half + 1.0, 0.0, w));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x)
        if (segment_distance(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, ax, ay, bx, by) <= half)
          p(y, x) = 1.0;
  }
}

inline void draw_ellipse(Plane& p, Rng& rng) {
  const double h = static_cast<double>(p.height), w = static_cast<double>(p.width);
  const double cy = uniform(rng, 0.0, h), cx = uniform(rng, 0.0, w);
  const double ry = uniform(rng, 0.05, 0.2) * h, rx = uniform(rng, 0.05, 0.2) * w;
  const double a = uniform(rng, 0.0, std::numbers::pi), ca = std::cos(a), sa = std::sin(a);
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
      if (u * u + v * v <= 1.0) p(y, x) = 1.0;
    }
}

inline void draw_rectangle(Plane& p, Rng& rng) {
  const double h = static_cast<double>(p.height), w = static_cast<double>(p.width);
  const double cy = uniform(rng, 0.0, h), cx = uniform(rng, 0.0, w);
  const double hy = uniform(rng, 0.05, 0.2) * h, hx = uniform(rng, 0.05, 0.2) * w;
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      if (std::abs(py - cy) <= hy && std::abs(px - cx) <= hx) p(y, x) = 1.0;
    }
}

inline void draw_element(Plane& p, const MaskSpec& spec, Rng& rng) {
  const double total = spec.weight_polyline + spec.weight_ellipse + spec.weight_rectangle;
  const double r = uniform(rng, 0.0, total);
  if (r < spec.weight_polyline) draw_polyline(p, spec, rng);
  else if (r < spec.weight_polyline + spec.weight_ellipse) draw_ellipse(p, rng);
  else draw_rectangle(p, rng);
}

}  // namespace detail

// Draws a random number of overlapping strokes and shapes. Undershoot adds
// more elements; overshoot throws the attempt away and starts over.
inline StrokeMask generate_stroke_mask(std::size_t height, std::size_t width, const MaskSpec& spec, Rng& rng) {
  spec.validate();
  if (height == 0 || width == 0) throw ValidationError("mask dimensions must be positive");
  constexpr std::size_t kMaxElements = 64;
  for (std::size_t attempt = 0; attempt < spec.max_attempts; ++attempt) {
    Plane p(height, width);
    const std::size_t n = uniform_index(rng, spec.strokes_min, spec.strokes_max);
    for (std::size_t i = 0; i < n; ++i) detail::draw_element(p, spec, rng);
    double cov = plane_mean(p);
    for (std::size_t extra = n; cov < spec.coverage_lo && extra < kMaxElements; ++extra) {
      detail::draw_element(p, spec, rng);
      cov = plane_mean(p);
    }
    if (cov >= spec.coverage_lo && cov <= spec.coverage_hi) return {std::move(p), cov};
  }
  throw Error("no mask with coverage in [" + std::to_string(spec.coverage_lo) + ", " +
              std::to_string(spec.coverage_hi) + "] after " + std::to_string(spec.max_attempts) + " attempts");
}

// ---------------------------------------------------------------------------
// Simulated inpainting and compositing

struct PixelSample {
  ImageBuffer image;
  Plane mask;                           // 1 = generated pixel
  std::string provenance;               // simulated_inpaint | cutmix | whole_real | whole_fake
  std::vector<std::string> source_ids;  // generator(s) involved
};

// Context-aware stand-in for an inpainting model: the original blurred at
// sigma 4, plus zero-mean octave noise of the given amplitude, then the
// generator fingerprint. Returned full frame; compositing is separate.
inline ImageBuffer simulate_inpaint_fill(const ImageBuffer& original, const StrokeMask& mask, const FingerprintSpec& fp,
                                         Rng& rng, double noise_amplitude = 0.06) {
  if (mask.plane.height != original.height() || mask.plane.width != original.width())
    throw ShapeError("mask and image dimensions differ");
  fp.validate();
  ImageBuffer fill = gaussian_blur(original, 4.0);
  for (std::size_t c = 0; c < fill.channels(); ++c) {
    const Plane noise = value_noise(rng, fill.height(), fill.width());
    if (noise_amplitude == 0.0) continue;
    for (std::size_t y = 0; y < fill.height(); ++y)
      for (std::size_t x = 0; x < fill.width(); ++x)
        fill.set(y, x, c, fill.at(y, x, c) + noise_amplitude * (noise(y, x) - 0.5) * 2.0);
  }
  return apply_fingerprint(fill, fp, rng);
}

// Hard blend: mask ? fill : original, so unmasked pixels keep their exact values.
inline PixelSample composite_inpaint(const ImageBuffer& original, const ImageBuffer& fill, const StrokeMask& mask) {
  if (original.height() != fill.height() || original.width() != fill.width() ||
      original.channels() != fill.channels())
    throw ShapeError("original and fill dimensions differ");
  if (mask.plane.height != original.height() || mask.plane.width != original.width())
    throw ShapeError("mask and image dimensions differ");
  PixelSample s{original, mask.plane, "simulated_inpaint", {}};
  for (std::size_t y = 0; y < original.height(); ++y)
    for (std::size_t x = 0; x < original.width(); ++x)
      if (mask.plane(y, x) > 0.5)
        for (std::size_t c = 0; c < original.channels(); ++c) s.image.set(y, x, c, fill.at(y, x, c));
  return s;
}

struct CutMixSpec {
  std::size_t blocks_min = 1;
  std::size_t blocks_max = 3;
  double side_lo = 0.1;  // block side as a fraction of the image side
  double side_hi = 0.4;
  double p_swap = 0.5;

  void validate() const {
    if (blocks_min < 1 || blocks_max < blocks_min) throw ValidationError("cutmix needs at least one block");
    if (!(side_lo > 0.0 && side_hi >= side_lo && side_hi <= 1.0)) throw ValidationError("cutmix side range is invalid");
    if (!(p_swap >= 0.0 && p_swap <= 1.0)) throw ValidationError("cutmix swap probability must lie in [0,1]");
  }
};

struct Rect {
  std::size_t top, left, height, width;
};

// Pastes 1-3 rectangles of one image into the other. Normally the canvas is
// real and the blocks are fake; with probability p_swap the roles swap and the
// label becomes everything outside the blocks.
inline PixelSample cutmix_sample(const ImageBuffer& real, const ImageBuffer& fake, Rng& rng,
                                 const CutMixSpec& spec = {}, std::vector<Rect>* rects_out = nullptr) {
  spec.validate();
  if (real.height() != fake.height() || real.width() != fake.width() || real.channels() != fake.channels())
    throw ShapeError("cutmix images must have equal dimensions");
  const std::size_t h = real.height(), w = real.width();
  const bool swap = coin(rng, spec.p_swap);
  const std::size_t n = uniform_index(rng, spec.blocks_min, spec.blocks_max);
  std::vector<Rect> rects;
  for (std::size_t i = 0; i < n; ++i) {
    const auto bh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(uniform(rng, spec.side_lo, spec.side_hi) * h)));
    const auto bw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(uniform(rng, spec.side_lo, spec.side_hi) * w)));
    const std::size_t top = uniform_index(rng, 0, h - bh), left = uniform_index(rng, 0, w - bw);
    rects.push_back({top, left, bh, bw});
  }
  const ImageBuffer& canvas = swap ? fake : real;
  const ImageBuffer& blocks = swap ? real : fake;
  PixelSample s{canvas, Plane(h, w, swap ? 1.0 : 0.0), "cutmix", {}};
  for (const auto& r : rects)
    for (std::size_t y = r.top; y < r.top + r.height; ++y)
      for (std::size_t x = r.left; x < r.left + r.width; ++x) {
        for (std::size_t c = 0; c < canvas.channels(); ++c) s.image.set(y, x, c, blocks.at(y, x, c));
        s.mask(y, x) = swap ? 0.0 : 1.0;
      }
  if (rects_out) *rects_out = rects;
  return s;
}

// ---------------------------------------------------------------------------
// Pixel datasets

enum class PixelProvenance { simulated_inpaint, cutmix, whole };

inline std::string provenance_name(PixelProvenance p) {
  switch (p) {
    case PixelProvenance::simulated_inpaint: return "simulated_inpaint";
    case PixelProvenance::cutmix: return "cutmix";
    case PixelProvenance::whole: return "whole";
  }
  return "?";
}

inline PixelProvenance provenance_from_name(const std::string& s) {
  for (auto p : {PixelProvenance::simulated_inpaint, PixelProvenance::cutmix, PixelProvenance::whole})
    if (provenance_name(p) == s) return p;
  throw ValidationError("unknown pixel data kind '" + s + "' (simulated_inpaint, cutmix, whole)");
}

struct PixelSourceSpec {
  std::string id;
  FingerprintSpec fingerprint;
};

// Two inpainting generators with unrelated fingerprints: a block codec and a periodic spike.
inline std::vector<PixelSourceSpec> default_pixel_sources() {
  PixelSourceSpec a{"inpaint-a", {}}, b{"inpaint-b", {}};
  a.fingerprint.family = "blockcodec";
  a.fingerprint.channel_mix = ChannelMix{{{0.92, 0.08, 0.0}, {0.0, 0.95, 0.05}, {0.04, 0.0, 0.96}}};
  a.fingerprint.dct_quantization = DctQuantization{1.0};
  b.fingerprint.family = "periodic";
  b.fingerprint.spectral_spike = SpectralSpike{11, 5, 0.04};
  return {a, b};
}

struct PixelDataConfig {
  std::size_t image_size = 64;
  MaskSpec mask;
  CutMixSpec cutmix;
  double noise_amplitude = 0.06;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Deterministic per-sample synthesis; sample i depends only on
// (seed, kind, source, split, i).
inline PixelSample make_pixel_sample(const PixelSourceSpec& src, PixelProvenance kind, Split split, std::size_t i,
                                     const PixelDataConfig& cfg) {
  Rng rng = derive_rng(cfg.seed, "pixel", provenance_name(kind), src.id, split_name(split), i);
  const std::size_t n = cfg.image_size;
  switch (kind) {
    case PixelProvenance::simulated_inpaint: {
      const ImageBuffer original = synth_real_image(rng, n);
      const StrokeMask mask = generate_stroke_mask(n, n, cfg.mask, rng);
      const ImageBuffer fill = simulate_inpaint_fill(original, mask, src.fingerprint, rng, cfg.noise_amplitude);
      PixelSample s = composite_inpaint(original, fill, mask);
      s.image = quantize_8bit(s.image);
      s.source_ids = {src.id};
      return s;
    }
    case PixelProvenance::cutmix: {
      const ImageBuffer real = synth_real_image(rng, n);
      const ImageBuffer fake = synth_generated_image(rng, n, src.fingerprint);
      PixelSample s = cutmix_sample(real, fake, rng, cfg.cutmix);
      s.source_ids = {src.id};
      return s;
    }
    case PixelProvenance::whole: {
      // Even indices real (all-zero mask), odd indices fake (all-one mask).
      if (i % 2 == 0) return {synth_real_image(rng, n), Plane(n, n, 0.0), "whole_real", {}};
      return {synth_generated_image(rng, n, src.fingerprint), Plane(n, n, 1.0), "whole_fake", {src.id}};
    }
  }
  throw ValidationError("unknown pixel provenance");
}

inline std::vector<PixelSample> make_pixel_samples(const PixelSourceSpec& src, PixelProvenance kind, Split split,
                                                   std::size_t count, const PixelDataConfig& cfg) {
  std::vector<PixelSample> out(count);
  parallel_for(count, cfg.threads, [&](std::size_t i) { out[i] = make_pixel_sample(src, kind, split, i, cfg); });
  return out;
}

inline ImageBuffer mask_to_image(const Plane& mask) {
  ImageBuffer img(mask.height, mask.width, 1);
  for (std::size_t i = 0; i < mask.values.size(); ++i) img.set_index(i, mask.values[i] > 0.5 ? 1.0 : 0.0);
  return img;
}

inline Plane image_to_mask(const ImageBuffer& img) {
  if (img.channels() != 1) throw ValidationError("mask PNGs must be single-channel");
  Plane p(img.height(), img.width());
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const float v = img.pixels()[i];
    if (v != 0.0f && v != 1.0f) throw ValidationError("mask PNGs must contain only 0 and 255");
    p.values[i] = v;
  }
  return p;
}

// <root>/<source>/<split>/{images,masks}/NNNNNN.png
inline void save_pixel_split(const std::vector<PixelSample>& samples, const std::filesystem::path& root,
                             const std::string& source_id, Split split) {
  const auto base = root / source_id / split_name(split);
  std::filesystem::create_directories(base / "images");
  std::filesystem::create_directories(base / "masks");
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    save_png(samples[i].image, base / "images" / sample_filename(i));
    save_png(mask_to_image(samples[i].mask), base / "masks" / sample_filename(i));
    index.push_back({{"provenance", samples[i].provenance}, {"source_ids", samples[i].source_ids}});
  }
  detail::write_atomic(base / "samples.json", index.dump(1) + "\n");
}

inline std::vector<PixelSample> load_pixel_split(const std::filesystem::path& root, const std::string& source_id,
                                                 Split split) {
  const auto base = root / source_id / split_name(split);
  if (!std::filesystem::is_directory(base / "images"))
    throw IoError("no pixel dataset at '" + base.string() + "'");
  // samples.json is optional; without it provenance reads "loaded".
  nlohmann::json index = nlohmann::json::array();
  if (std::filesystem::exists(base / "samples.json")) {
    try {
      index = nlohmann::json::parse(detail::read_all(base / "samples.json"));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed '" + (base / "samples.json").string() + "': " + e.what());
    }
  }
  std::vector<PixelSample> out;
  for (std::size_t i = 0;; ++i) {
    const auto img = base / "images" / sample_filename(i);
    if (!std::filesystem::exists(img)) break;
    PixelSample s{load_png(img), image_to_mask(load_png(base / "masks" / sample_filename(i))), "loaded", {source_id}};
    if (i < index.size()) {
      s.provenance = index[i].value("provenance", s.provenance);
      s.source_ids = index[i].value("source_ids", s.source_ids);
    }
    if (s.mask.height != s.image.height() || s.mask.width != s.image.width())
      throw ValidationError("mask and image dimensions differ for '" + img.string() + "'");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("pixel dataset at '" + base.string() + "' is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Pixel training

struct PixelTrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ValidationError("pixel training needs at least one epoch");
    if (batch_size < 1) throw ValidationError("pixel batch size must be positive");
    if (!(adam.learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  }
};

struct PixelTrainResult {
  DetectorModel model;
  std::vector<double> epoch_losses;
};

inline Tensor masks_to_tensor(std::span<const PixelSample* const> samples) {
  const std::size_t h = samples[0]->mask.height, w = samples[0]->mask.width;
  Tensor t({samples.size(), 1, h, w});
  for (std::size_t n = 0; n < samples.size(); ++n)
    for (std::size_t i = 0; i < h * w; ++i) t[n * h * w + i] = static_cast<float>(samples[n]->mask.values[i]);
  return t;
}

// Trains a fresh pixel net with weighted Dice on the shuffled sample list.
// Sample order is the only randomness beyond initialisation.
inline PixelTrainResult train_pixel_detector(const std::vector<PixelSample>& samples, const PixelTrainConfig& config,
                                             const EventLog& log = {}) {
  config.validate();
  if (samples.empty()) throw ValidationError("pixel training needs at least one sample");
  const std::size_t size = samples[0].image.height();
  for (const auto& s : samples) {
    if (s.image.height() != size || s.image.width() != size)
      throw ValidationError("pixel samples must be square and share one size");
    if (s.mask.height != size || s.mask.width != size) throw ShapeError("mask and image dimensions differ");
  }
  PixelTrainResult r{build_pixel_net(size, derive_seed(config.seed, "pixel-model")), {}};
  std::map<std::string, std::size_t> provenance;
  for (const auto& s : samples) provenance[s.provenance]++;
  r.model.metadata["training_provenance"] = provenance;
  OptimizerState<float> opt{config.adam, {}, {}, 0};
  std::vector<std::size_t> order(samples.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = derive_rng(config.seed, "pixel-order", epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, 0, i - 1)]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - s);
      std::vector<ImageBuffer> imgs;
      std::vector<const PixelSample*> refs;
      for (std::size_t i = 0; i < n; ++i) {
        refs.push_back(&samples[order[s + i]]);
        imgs.push_back(refs.back()->image);
      }
      const auto trace = forward<float>(r.model.layers, r.model.params, images_to_tensor(imgs, r.model.input_filter));
      const auto loss = weighted_dice_loss<float>(trace.output(), masks_to_tensor(refs));
      const auto grads = backward(trace, r.model.params, loss.grad, false);
      optimizer_step(opt, r.model.params, grads.params);
      loss_sum += loss.value;
      ++batches;
    }
    r.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    log.emit("pixel_epoch_end", {{"epoch", epoch + 1}, {"mean_dice_loss", r.epoch_losses.back()}});
  }
  r.model.stage = 1;
  return r;
}

// Pixel metrics pooled over every pixel of every sample.
inline ClassificationMetrics evaluate_pixel_detector(const DetectorModel& model, const std::vector<PixelSample>& samples,
                                                     double threshold = 0.5) {
  if (samples.empty()) throw ValidationError("pixel evaluation needs at least one sample");
  std::vector<ImageBuffer> imgs;
  imgs.reserve(samples.size());
  for (const auto& s : samples) imgs.push_back(s.image);
  const auto maps = predict_masks(model, imgs);
  ConfusionCounts c;
  for (std::size_t n = 0; n < samples.size(); ++n)
    for (std::size_t i = 0; i < maps[n].values.size(); ++i)
      c.add(maps[n].values[i] > threshold, samples[n].mask.values[i] > 0.5);
  return c.metrics();
}

}  // namespace oaid
