#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "oaid/error.hpp"
#include "oaid/imaging.hpp"
#include "oaid/rng.hpp"

namespace oaid {

struct WatermarkPayload {
  static constexpr std::size_t kBits = 32;
  std::uint32_t bits = 0;

  bool bit(std::size_t i) const { return ((bits >> i) & 1u) != 0; }
  friend bool operator==(const WatermarkPayload&, const WatermarkPayload&) = default;
};

struct WatermarkReading {
  WatermarkPayload payload;
  // Per-bit agreement in [0.5, 1]; 0.5 means no information (no carrier block
  // or perfectly ambiguous votes).
  std::array<double, WatermarkPayload::kBits> confidence{};

  double mean_confidence() const {
    double acc = 0.0;
    for (double c : confidence) acc += c;
    return acc / static_cast<double>(confidence.size());
  }
};

struct AugmentConfig {
  std::size_t crop_size = 256;
  double p_blur = 0.01;
  double p_gray = 0.05;
  double p_watermark = 0.2;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 2.0;
  WatermarkPayload payload{0x5eed1e55u};
  double watermark_step = 8.0 / 255.0;  // QIM quantization step (delta)

  // Reduced crop for 64x64 corpora.
  static AugmentConfig desk() {
    AugmentConfig c;
    c.crop_size = 64;
    return c;
  }

  void validate() const {
    for (double p : {p_blur, p_gray, p_watermark})
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("augmentation probabilities must lie in [0,1]");
    if (crop_size < 16) throw ValidationError("crop_size must be at least 16");
    if (!(blur_sigma_min > 0.0 && blur_sigma_max >= blur_sigma_min))
      throw ValidationError("blur sigma range must be positive and ordered");
    if (!(watermark_step > 0.0)) throw ValidationError("watermark step must be positive");
  }
};

// The carrier is DCT coefficient (2, 1) of every full 8x8 luma block. Block b
// (raster order) carries payload bit b mod 32. Images below 64x64 have fewer
// than 32 blocks and therefore only carry a prefix of the payload.
constexpr std::size_t kWatermarkRow = 2;
constexpr std::size_t kWatermarkCol = 1;

namespace detail {

inline void require_watermark_size(const ImageBuffer& img) {
  if (img.height() < 32 || img.width() < 32)
    throw ValidationError("watermarking needs an image of at least 32x32, got " + std::to_string(img.height()) +
                          "x" + std::to_string(img.width()));
}

inline double carrier_coefficient(const Plane& luma, std::size_t by, std::size_t bx) {
  double acc = 0.0;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      acc += luma(by + y, bx + x) * dct8_basis_value(kWatermarkRow, kWatermarkCol, y, x);
  return acc;
}

// Nearest point of the lattice (2m + bit) * step.
inline double qim_target(double coefficient, bool bit, double step) {
  const double offset = bit ? step : 0.0;
  return std::round((coefficient - offset) / (2.0 * step)) * 2.0 * step + offset;
}

}  // namespace detail

inline ImageBuffer embed_watermark(const ImageBuffer& image, WatermarkPayload payload, double step = 8.0 / 255.0) {
  detail::require_watermark_size(image);
  if (!(step > 0.0)) throw ValidationError("watermark step must be positive");
  ImageBuffer out = image;
  const std::size_t bh = image.height() / 8, bw = image.width() / 8;
  // Clipping at 0/1 can pull a coefficient off its lattice point; a few
  // re-embedding passes settle it.
  for (int pass = 0; pass < 4; ++pass) {
    const Plane luma = luma_plane(out);
    bool changed = false;
    for (std::size_t b = 0; b < bh * bw; ++b) {
      const std::size_t by = (b / bw) * 8, bx = (b % bw) * 8;
      const double c = detail::carrier_coefficient(luma, by, bx);
      const double delta = detail::qim_target(c, payload.bit(b % WatermarkPayload::kBits), step) - c;
      if (std::abs(delta) < 1e-9) continue;
      changed = true;
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const double d = delta * dct8_basis_value(kWatermarkRow, kWatermarkCol, y, x);
          for (std::size_t ch = 0; ch < out.channels(); ++ch) out.set(by + y, bx + x, ch, out.at(by + y, bx + x, ch) + d);
        }
    }
    if (!changed) break;
  }
  return out;
}

inline WatermarkReading decode_watermark(const ImageBuffer& image, double step = 8.0 / 255.0) {
  detail::require_watermark_size(image);
  const Plane luma = luma_plane(image);
  const std::size_t bh = image.height() / 8, bw = image.width() / 8;
  std::array<double, WatermarkPayload::kBits> p_one{};
  std::array<std::size_t, WatermarkPayload::kBits> votes{};
  for (std::size_t b = 0; b < bh * bw; ++b) {
    const double c = detail::carrier_coefficient(luma, (b / bw) * 8, (b % bw) * 8);
    // Distance to the even lattice in units of step, in [0, 1]: 0 reads as a
    // clean 0 bit, 1 as a clean 1 bit.
    const double r = c / step;
    const double d_even = std::abs(r - 2.0 * std::round(r / 2.0));
    p_one[b % WatermarkPayload::kBits] += std::min(d_even, 1.0);
    ++votes[b % WatermarkPayload::kBits];
  }
  WatermarkReading reading;
  for (std::size_t i = 0; i < WatermarkPayload::kBits; ++i) {
    const double p = votes[i] ? p_one[i] / static_cast<double>(votes[i]) : 0.5;
    if (p > 0.5) reading.payload.bits |= (1u << i);
    reading.confidence[i] = std::max(p, 1.0 - p);
  }
  return reading;
}

// Which stochastic stages fired for one sample.
struct AugmentRecord {
  bool blur = false;
  bool gray = false;
  bool watermark = false;
  double blur_sigma = 0.0;
};

// random_crop -> blur (p_blur) -> grayscale (p_gray) -> watermark (p_watermark).
// Coins are drawn in that order every call, whether or not they fire, so the
// rng stream position depends only on the call count.
inline ImageBuffer apply_train_augment(const ImageBuffer& image, const AugmentConfig& config, Rng& rng,
                                       AugmentRecord* record = nullptr) {
  config.validate();
  if (image.height() < config.crop_size || image.width() < config.crop_size)
    throw ValidationError("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                          " is smaller than crop size " + std::to_string(config.crop_size));
  ImageBuffer out = random_crop(image, config.crop_size, rng);
  const bool blur = coin(rng, config.p_blur);
  const double sigma = uniform(rng, config.blur_sigma_min, config.blur_sigma_max);
  const bool gray = coin(rng, config.p_gray);
  const bool watermark = coin(rng, config.p_watermark);
  if (blur) out = gaussian_blur(out, sigma);
  if (gray) out = to_grayscale(out);
  if (watermark) out = embed_watermark(out, config.payload, config.watermark_step);
  if (record) *record = {blur, gray, watermark, blur ? sigma : 0.0};
  return out;
}

// Evaluation path: centre crop only.
inline ImageBuffer apply_eval_transform(const ImageBuffer& image, const AugmentConfig& config) {
  return center_crop(image, config.crop_size);
}

}  // namespace oaid
