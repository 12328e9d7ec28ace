#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "oaid/error.hpp"
#include "oaid/rng.hpp"

namespace oaid {

// H x W x C raster with every sample in [0, 1], row-major interleaved channels.
class ImageBuffer {
public:
  ImageBuffer() = default;

  ImageBuffer(std::size_t height, std::size_t width, std::size_t channels, float fill = 0.0f)
      : height_(height), width_(width), channels_(channels) {
    validate_dims();
    if (!(fill >= 0.0f && fill <= 1.0f)) throw ValidationError("image fill value outside [0,1]");
    pixels_.assign(height * width * channels, fill);
  }

  ImageBuffer(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> pixels)
      : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
    validate_dims();
    if (pixels_.size() != height * width * channels)
      throw ValidationError("pixel count " + std::to_string(pixels_.size()) + " does not match " +
                            std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels));
    for (float v : pixels_)
      if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("pixel value outside [0,1]");
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return pixels_.size(); }
  bool empty() const noexcept { return pixels_.empty(); }

  std::span<const float> pixels() const noexcept { return pixels_; }

  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels_[(y * width_ + x) * channels_ + c]; }

  // Clip-on-write: every store lands in [0,1].
  void set(std::size_t y, std::size_t x, std::size_t c, double v) {
    pixels_[(y * width_ + x) * channels_ + c] = clip(v);
  }
  void set_index(std::size_t i, double v) { pixels_[i] = clip(v); }

  static float clip(double v) { return static_cast<float>(std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0)); }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

private:
  void validate_dims() const {
    if (height_ == 0 || width_ == 0) throw ValidationError("image dimensions must be positive");
    if (channels_ != 1 && channels_ != 3) throw ValidationError("image must have 1 or 3 channels");
  }

  std::size_t height_ = 0, width_ = 0, channels_ = 0;
  std::vector<float> pixels_;
};

// Unbounded single-channel float plane (DCT coefficients, luma, spectra).
struct Plane {
  std::size_t height = 0, width = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  double& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

inline Plane channel_plane(const ImageBuffer& img, std::size_t c) {
  Plane p(img.height(), img.width());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) p(y, x) = img.at(y, x, c);
  return p;
}

inline Plane luma_plane(const ImageBuffer& img) {
  if (img.channels() == 1) return channel_plane(img, 0);
  Plane p(img.height(), img.width());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      p(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return p;
}

// Rounds every sample to the nearest 8-bit level, matching a PNG round trip.
inline ImageBuffer quantize_8bit(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (std::size_t i = 0; i < img.size(); ++i) out.set_index(i, std::round(img.pixels()[i] * 255.0) / 255.0);
  return out;
}

inline ImageBuffer crop(const ImageBuffer& img, std::size_t top, std::size_t left, std::size_t height,
                        std::size_t width) {
  if (top + height > img.height() || left + width > img.width())
    throw ValidationError("crop window exceeds image bounds");
  ImageBuffer out(height, width, img.channels());
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < img.channels(); ++c) out.set(y, x, c, img.at(top + y, left + x, c));
  return out;
}

inline ImageBuffer center_crop(const ImageBuffer& img, std::size_t size) {
  if (size == 0 || size > std::min(img.height(), img.width()))
    throw ValidationError("center crop size " + std::to_string(size) + " exceeds image " +
                          std::to_string(img.height()) + "x" + std::to_string(img.width()));
  return crop(img, (img.height() - size) / 2, (img.width() - size) / 2, size, size);
}

inline ImageBuffer random_crop(const ImageBuffer& img, std::size_t size, Rng& rng) {
  if (size == 0 || size > std::min(img.height(), img.width()))
    throw ValidationError("random crop size " + std::to_string(size) + " exceeds image " +
                          std::to_string(img.height()) + "x" + std::to_string(img.width()));
  const std::size_t top = uniform_index(rng, 0, img.height() - size);
  const std::size_t left = uniform_index(rng, 0, img.width() - size);
  return crop(img, top, left, size, size);
}

// Bilinear resampling with half-pixel centres and edge clamping.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ValidationError("resize target must be positive");
  auto axis = [](std::size_t in, std::size_t out) {
    std::vector<std::pair<std::size_t, double>> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::clamp((static_cast<double>(o) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      taps[o] = {i0, src - static_cast<double>(i0)};
    }
    return taps;
  };
  const auto ty = axis(img.height(), height), tx = axis(img.width(), width);
  ImageBuffer out(height, width, img.channels());
  for (std::size_t y = 0; y < height; ++y) {
    const auto [y0, fy] = ty[y];
    const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
    for (std::size_t x = 0; x < width; ++x) {
      const auto [x0, fx] = tx[x];
      const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
      for (std::size_t c = 0; c < img.channels(); ++c) {
        const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
        const double bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
        out.set(y, x, c, top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

inline ImageBuffer resize_short_side(const ImageBuffer& img, std::size_t target) {
  if (target == 0) throw ValidationError("resize target must be at least 1");
  const double scale = static_cast<double>(target) / static_cast<double>(std::min(img.height(), img.width()));
  const auto h = img.height() <= img.width() ? target
                                             : static_cast<std::size_t>(std::lround(img.height() * scale));
  const auto w = img.width() < img.height() ? target
                                            : static_cast<std::size_t>(std::lround(img.width() * scale));
  return resize_bilinear(img, std::max<std::size_t>(h, 1), std::max<std::size_t>(w, 1));
}

inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian blur sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian, radius ceil(3 sigma), clamped borders.
inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(img.height()), w = static_cast<std::ptrdiff_t>(img.width());
  const std::size_t ch = img.channels();
  std::vector<double> tmp(img.size());
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] *
                 img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x + i, 0, w - 1)), c);
        tmp[(static_cast<std::size_t>(y * w + x)) * ch + c] = acc;
      }
  ImageBuffer out(img.height(), img.width(), ch);
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] *
                 tmp[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y + i, 0, h - 1) * w + x) * ch + c];
        out.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c, acc);
      }
  return out;
}

// Rec. 601 luma replicated into three channels; 1-channel images pass through.
inline ImageBuffer to_grayscale(const ImageBuffer& img) {
  if (img.channels() == 1) return img;
  ImageBuffer out(img.height(), img.width(), 3);
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      const double luma = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      for (std::size_t c = 0; c < 3; ++c) out.set(y, x, c, luma);
    }
  return out;
}

// Drops the bottom `rows` rows (service watermark strip).
inline ImageBuffer crop_bottom(const ImageBuffer& img, std::size_t rows) {
  if (rows >= img.height())
    throw ValidationError("cannot crop " + std::to_string(rows) + " rows from a " + std::to_string(img.height()) +
                          "-row image");
  return crop(img, 0, 0, img.height() - rows, img.width());
}

// ---------------------------------------------------------------------------
// 8x8 block DCT

namespace detail {

inline const std::array<std::array<double, 8>, 8>& dct8_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (std::size_t u = 0; u < 8; ++u)
      for (std::size_t x = 0; x < 8; ++x) {
        const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        b[u][x] = a * std::cos((2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(u) * std::numbers::pi / 16.0);
      }
    return b;
  }();
  return basis;
}

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  if (m == 1) return 0;
  const std::ptrdiff_t period = 2 * (m - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < m ? i : period - i);
}

}  // namespace detail

// Orthonormal 2-D DCT-II basis value for frequency (u, v) at pixel (y, x) of an 8x8 block.
inline double dct8_basis_value(std::size_t u, std::size_t v, std::size_t y, std::size_t x) {
  const auto& b = detail::dct8_basis();
  return b[u][y] * b[v][x];
}

// Reflect-pads to a multiple of 8 on each axis.
inline Plane pad_to_block(const Plane& p) {
  const std::size_t h = (p.height + 7) / 8 * 8, w = (p.width + 7) / 8 * 8;
  if (h == p.height && w == p.width) return p;
  Plane out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      out(y, x) = p(detail::reflect_index(static_cast<std::ptrdiff_t>(y), p.height),
                    detail::reflect_index(static_cast<std::ptrdiff_t>(x), p.width));
  return out;
}

namespace detail {

// forward: C = B X B^T per block; inverse: X = B^T C B.
inline Plane block_transform(const Plane& in, bool inverse) {
  const Plane p = pad_to_block(in);
  const auto& b = dct8_basis();
  Plane out(p.height, p.width);
  std::array<std::array<double, 8>, 8> tmp{};
  for (std::size_t by = 0; by < p.height; by += 8)
    for (std::size_t bx = 0; bx < p.width; bx += 8) {
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < 8; ++k)
            acc += (inverse ? b[k][i] : b[i][k]) * p(by + k, bx + j);
          tmp[i][j] = acc;
        }
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < 8; ++k) acc += tmp[i][k] * (inverse ? b[k][j] : b[j][k]);
          out(by + i, bx + j) = acc;
        }
    }
  return out;
}

}  // namespace detail

inline Plane block_dct8(const Plane& pixels) { return detail::block_transform(pixels, false); }
inline Plane block_idct8(const Plane& coefficients) { return detail::block_transform(coefficients, true); }

// |DFT|^2 of a plane (mean removed), indexed [fy][fx] in cycles per image.
inline Plane power_spectrum(const Plane& p) {
  const std::size_t h = p.height, w = p.width;
  double mean = 0.0;
  for (double v : p.values) mean += v;
  mean /= static_cast<double>(p.values.size());
  auto twiddles = [](std::size_t n) {
    std::vector<std::complex<double>> t(n);
    for (std::size_t k = 0; k < n; ++k)
      t[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
    return t;
  };
  const auto tw = twiddles(w), th = twiddles(h);
  std::vector<std::complex<double>> rows(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t fx = 0; fx < w; ++fx) {
      std::complex<double> acc{};
      for (std::size_t x = 0; x < w; ++x) acc += (p(y, x) - mean) * tw[(fx * x) % w];
      rows[y * w + fx] = acc;
    }
  Plane out(h, w);
  for (std::size_t fy = 0; fy < h; ++fy)
    for (std::size_t fx = 0; fx < w; ++fx) {
      std::complex<double> acc{};
      for (std::size_t y = 0; y < h; ++y) acc += rows[y * w + fx] * th[(fy * y) % h];
      out(fy, fx) = std::norm(acc);
    }
  return out;
}

inline double mean_value(const ImageBuffer& img) {
  double acc = 0.0;
  for (float v : img.pixels()) acc += v;
  return acc / static_cast<double>(img.size());
}

inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.size() != b.size()) throw ValidationError("psnr needs images of equal size");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.pixels()[i]) - b.pixels()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

}  // namespace oaid
