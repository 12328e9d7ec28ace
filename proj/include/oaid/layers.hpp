#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "oaid/error.hpp"
#include "oaid/gemm.hpp"
#include "oaid/rng.hpp"
#include "oaid/tensor.hpp"

namespace oaid {

enum class LayerKind { conv2d, relu, maxpool2, global_avg_pool, linear, bilinear_upsample, sigmoid, softmax };

// Border handling for conv2d. Zero padding is the textbook variant; replicate
// padding keeps a constant image constant through the whole stack.
enum class PadMode { zeros, replicate };

inline std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::linear: return "linear";
    case LayerKind::bilinear_upsample: return "bilinear_upsample";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

inline LayerKind kind_from_name(std::string_view name) {
  for (auto k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2, LayerKind::global_avg_pool,
                 LayerKind::linear, LayerKind::bilinear_upsample, LayerKind::sigmoid, LayerKind::softmax})
    if (kind_name(k) == name) return k;
  throw ValidationError("unknown layer kind '" + std::string(name) + "'");
}

struct LayerSpec {
  LayerKind kind{LayerKind::relu};
  std::size_t in_channels = 0;   // conv2d input channels, linear input features
  std::size_t out_channels = 0;  // conv2d output channels, linear output features
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::zeros;
  std::size_t factor = 0;  // bilinear_upsample

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t padding,
                        std::size_t stride = 1, PadMode mode = PadMode::zeros) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = kernel;
    s.padding = padding;
    s.stride = stride;
    s.pad_mode = mode;
    return s;
  }
  static LayerSpec linear(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::linear;
    s.in_channels = in;
    s.out_channels = out;
    return s;
  }
  static LayerSpec upsample(std::size_t factor) {
    LayerSpec s;
    s.kind = LayerKind::bilinear_upsample;
    s.factor = factor;
    return s;
  }
  static LayerSpec of(LayerKind kind) {
    LayerSpec s;
    s.kind = kind;
    return s;
  }

  bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Checks hyperparameters and channel wiring across consecutive layers.
inline void validate_layers(std::span<const LayerSpec> layers) {
  std::optional<std::size_t> channels;
  bool flat = false;
  auto fail = [](std::size_t i, const LayerSpec& l, const std::string& msg) {
    throw ShapeError("layer " + std::to_string(i) + " (" + std::string(kind_name(l.kind)) + "): " + msg);
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::conv2d:
        if (l.kernel == 0 || l.stride == 0) fail(i, l, "kernel and stride must be positive");
        if (l.kernel != 1 && l.kernel != 3) fail(i, l, "kernel must be 1 or 3");
        if (l.in_channels == 0 || l.out_channels == 0) fail(i, l, "channel counts must be positive");
        if (flat) fail(i, l, "needs a spatial input");
        if (channels && *channels != l.in_channels)
          fail(i, l, "expects " + std::to_string(l.in_channels) + " input channels, previous layer gives " +
                         std::to_string(*channels));
        channels = l.out_channels;
        break;
      case LayerKind::linear:
        if (l.in_channels == 0 || l.out_channels == 0) fail(i, l, "feature counts must be positive");
        if (channels && *channels != l.in_channels)
          fail(i, l, "expects " + std::to_string(l.in_channels) + " input features, previous layer gives " +
                         std::to_string(*channels));
        if (i > 0 && !flat) fail(i, l, "needs a flat (N x features) input");
        channels = l.out_channels;
        flat = true;
        break;
      case LayerKind::maxpool2:
        if (flat) fail(i, l, "needs a spatial input");
        break;
      case LayerKind::global_avg_pool:
        if (flat) fail(i, l, "needs a spatial input");
        flat = true;
        break;
      case LayerKind::bilinear_upsample:
        if (l.factor == 0) fail(i, l, "upsample factor must be positive");
        if (flat) fail(i, l, "needs a spatial input");
        break;
      case LayerKind::relu:
      case LayerKind::sigmoid:
      case LayerKind::softmax:
        break;
    }
  }
}

inline std::vector<Shape> param_shapes(std::span<const LayerSpec> layers) {
  std::vector<Shape> shapes;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::conv2d) {
      shapes.push_back({l.out_channels, l.in_channels, l.kernel, l.kernel});
      shapes.push_back({l.out_channels});
    } else if (l.kind == LayerKind::linear) {
      shapes.push_back({l.out_channels, l.in_channels});
      shapes.push_back({l.out_channels});
    }
  }
  return shapes;
}

inline std::size_t parameter_count(std::span<const LayerSpec> layers) {
  std::size_t n = 0;
  for (const auto& s : param_shapes(layers)) n += shape_volume(s);
  return n;
}

// He-uniform weights (bound sqrt(6 / fan_in)), zero biases.
template <typename T>
ParamSet<T> init_params(std::span<const LayerSpec> layers, std::uint64_t seed) {
  validate_layers(layers);
  Rng rng{derive_seed(seed, "init")};
  ParamSet<T> params;
  for (const auto& l : layers) {
    if (!l.has_params()) continue;
    const std::size_t fan_in = l.kind == LayerKind::conv2d ? l.in_channels * l.kernel * l.kernel : l.in_channels;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Shape wshape = l.kind == LayerKind::conv2d ? Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}
                                               : Shape{l.out_channels, l.in_channels};
    BasicTensor<T> w(wshape);
    for (auto& v : w.data()) v = static_cast<T>(uniform(rng, -bound, bound));
    params.push_back(std::move(w));
    params.emplace_back(Shape{l.out_channels}, T{0});
  }
  return params;
}

template <typename T>
struct Trace {
  std::vector<LayerSpec> layers;
  // activations[i] is the input of layer i; the last entry is the network output.
  std::vector<BasicTensor<T>> activations;
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<std::vector<T>> conv_cols;  // im2col matrices of conv layers

  bool complete() const { return !layers.empty() && activations.size() == layers.size() + 1; }
  const BasicTensor<T>& output() const {
    if (!complete()) throw Error("trace holds no completed forward pass");
    return activations.back();
  }
};

template <typename T>
struct Gradients {
  ParamSet<T> params;
  BasicTensor<T> input;
};

namespace detail {

[[noreturn]] inline void layer_shape_error(std::size_t index, const LayerSpec& l, const std::string& msg) {
  throw ShapeError("layer " + std::to_string(index) + " (" + std::string(kind_name(l.kind)) + "): " + msg);
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
  PadMode mode;
  std::size_t patch() const { return c * k * k; }
  std::size_t plane_out() const { return ho * wo; }
  std::size_t columns() const { return n * ho * wo; }
};

template <typename T>
ConvGeometry conv_geometry(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x) {
  if (x.rank() != 4) layer_shape_error(index, l, "expected N x C x H x W input, got " + shape_string(x.shape()));
  if (x.dim(1) != l.in_channels)
    layer_shape_error(index, l, "expected " + std::to_string(l.in_channels) + " input channels, got " +
                                    std::to_string(x.dim(1)));
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel)
    layer_shape_error(index, l, "input " + shape_string(x.shape()) + " smaller than kernel");
  ConvGeometry g{x.dim(0), x.dim(1), h, w, l.out_channels, l.kernel, l.stride, l.padding, 0, 0, l.pad_mode};
  g.ho = (h + 2 * l.padding - l.kernel) / l.stride + 1;
  g.wo = (w + 2 * l.padding - l.kernel) / l.stride + 1;
  return g;
}

// Maps a padded coordinate to a source index, or -1 for a zero tap.
inline std::ptrdiff_t source_index(std::ptrdiff_t i, std::size_t n, PadMode mode) {
  if (i >= 0 && i < static_cast<std::ptrdiff_t>(n)) return i;
  if (mode == PadMode::zeros) return -1;
  return std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1);
}

// Source row/column for every (kernel tap, output position), -1 for a zero tap.
inline std::vector<std::ptrdiff_t> tap_table(std::size_t k, std::size_t out, std::size_t stride, std::size_t pad,
                                             std::size_t n, PadMode mode) {
  std::vector<std::ptrdiff_t> t(k * out);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t o = 0; o < out; ++o)
      t[kk * out + o] = source_index(static_cast<std::ptrdiff_t>(o * stride + kk) - static_cast<std::ptrdiff_t>(pad),
                                     n, mode);
  return t;
}

// cols: patch() rows x columns(), column index = n * HoWo + oh * Wo + ow.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, std::vector<T>& cols) {
  const std::size_t ncols = g.columns();
  cols.resize(g.patch() * ncols);
  const auto th = tap_table(g.k, g.ho, g.stride, g.pad, g.h, g.mode);
  const auto tw = tap_table(g.k, g.wo, g.stride, g.pad, g.w, g.mode);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.c; ++c) {
      const T* plane = x + (n * g.c + c) * g.h * g.w;
      for (std::size_t ki = 0; ki < g.k; ++ki)
        for (std::size_t kj = 0; kj < g.k; ++kj) {
          T* row = cols.data() + ((c * g.k + ki) * g.k + kj) * ncols + n * g.plane_out();
          const std::ptrdiff_t* cw = tw.data() + kj * g.wo;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const auto ih = th[ki * g.ho + oh];
            T* dst = row + oh * g.wo;
            if (ih < 0) {
              std::fill(dst, dst + g.wo, T{0});
              continue;
            }
            const T* src = plane + ih * static_cast<std::ptrdiff_t>(g.w);
            for (std::size_t ow = 0; ow < g.wo; ++ow) dst[ow] = cw[ow] < 0 ? T{0} : src[cw[ow]];
          }
        }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const std::vector<T>& cols, T* dx) {
  const std::size_t ncols = g.columns();
  const auto th = tap_table(g.k, g.ho, g.stride, g.pad, g.h, g.mode);
  const auto tw = tap_table(g.k, g.wo, g.stride, g.pad, g.w, g.mode);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.c; ++c) {
      T* plane = dx + (n * g.c + c) * g.h * g.w;
      for (std::size_t ki = 0; ki < g.k; ++ki)
        for (std::size_t kj = 0; kj < g.k; ++kj) {
          const T* row = cols.data() + ((c * g.k + ki) * g.k + kj) * ncols + n * g.plane_out();
          const std::ptrdiff_t* cw = tw.data() + kj * g.wo;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const auto ih = th[ki * g.ho + oh];
            if (ih < 0) continue;
            T* dst = plane + ih * static_cast<std::ptrdiff_t>(g.w);
            const T* src = row + oh * g.wo;
            for (std::size_t ow = 0; ow < g.wo; ++ow)
              if (cw[ow] >= 0) dst[cw[ow]] += src[ow];
          }
        }
    }
}

// `cols` receives the im2col matrix so backward can reuse it.
template <typename T>
BasicTensor<T> conv_forward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x,
                            const BasicTensor<T>& weight, const BasicTensor<T>& bias, std::vector<T>& cols) {
  const auto g = conv_geometry(index, l, x);
  im2col(g, x.raw(), cols);
  const std::size_t ncols = g.columns();
  const std::size_t hw = g.plane_out();
  BasicTensor<T> y({g.n, g.o, g.ho, g.wo});
  if (g.n == 1) {
    for (std::size_t o = 0; o < g.o; ++o) std::fill(y.raw() + o * hw, y.raw() + (o + 1) * hw, bias[o]);
    gemm<T>(false, false, g.o, ncols, g.patch(), T{1}, weight.raw(), g.patch(), cols.data(), ncols, T{1}, y.raw(),
            ncols);
    return y;
  }
  std::vector<T> y2(g.o * ncols);
  gemm<T>(false, false, g.o, ncols, g.patch(), T{1}, weight.raw(), g.patch(), cols.data(), ncols, T{0},
          y2.data(), ncols);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T* src = y2.data() + o * ncols + n * hw;
      T* dst = y.raw() + (n * g.o + o) * hw;
      const T b = bias[o];
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
    }
  return y;
}

// Returns dL/dx, or an empty tensor when need_dx is false.
template <typename T>
BasicTensor<T> conv_backward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x,
                             const std::vector<T>& cols, const BasicTensor<T>& weight, const BasicTensor<T>& dy,
                             BasicTensor<T>& dweight, BasicTensor<T>& dbias, bool need_dx) {
  const auto g = conv_geometry(index, l, x);
  const std::size_t ncols = g.columns(), hw = g.plane_out();
  std::vector<T> dy2(g.o * ncols);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T* src = dy.raw() + (n * g.o + o) * hw;
      std::copy(src, src + hw, dy2.data() + o * ncols + n * hw);
    }
  gemm<T>(false, true, g.o, g.patch(), ncols, T{1}, dy2.data(), ncols, cols.data(), ncols, T{0}, dweight.raw(),
          g.patch());
  for (std::size_t o = 0; o < g.o; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ncols; ++i) acc += dy2[o * ncols + i];
    dbias[o] = static_cast<T>(acc);
  }
  if (!need_dx) return {};
  std::vector<T> dcols(g.patch() * ncols);
  gemm<T>(true, false, g.patch(), ncols, g.o, T{1}, weight.raw(), g.patch(), dy2.data(), ncols, T{0},
          dcols.data(), ncols);
  BasicTensor<T> dx(x.shape());
  col2im(g, dcols, dx.raw());
  return dx;
}

template <typename T>
void require_spatial(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x) {
  if (x.rank() != 4) layer_shape_error(index, l, "expected N x C x H x W input, got " + shape_string(x.shape()));
}

template <typename T>
BasicTensor<T> maxpool_forward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x,
                               std::vector<std::size_t>* argmax) {
  require_spatial(index, l, x);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) layer_shape_error(index, l, "input " + shape_string(x.shape()) + " too small to pool");
  const std::size_t ho = h / 2, wo = w / 2;
  BasicTensor<T> y({n, c, ho, wo});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t out = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow, ++out) {
        std::size_t best = base + (2 * oh) * w + 2 * ow;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = base + (2 * oh + di) * w + 2 * ow + dj;
            if (x[idx] > x[best]) best = idx;
          }
        y[out] = x[best];
        if (argmax) (*argmax)[out] = best;
      }
  }
  return y;
}

template <typename T>
BasicTensor<T> global_avg_pool_forward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x) {
  require_spatial(index, l, x);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> y({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
    y[p] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return y;
}

template <typename T>
BasicTensor<T> linear_forward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x,
                              const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (x.rank() != 2 || x.dim(1) != l.in_channels)
    layer_shape_error(index, l, "expected N x " + std::to_string(l.in_channels) + " input, got " +
                                    shape_string(x.shape()));
  const std::size_t n = x.dim(0);
  BasicTensor<T> y({n, l.out_channels});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < l.out_channels; ++o) y[i * l.out_channels + o] = bias[o];
  gemm<T>(false, true, n, l.out_channels, l.in_channels, T{1}, x.raw(), l.in_channels, weight.raw(), l.in_channels,
          T{1}, y.raw(), l.out_channels);
  return y;
}

// Half-pixel-centred sampling positions with edge clamping.
struct UpsampleTap {
  std::size_t i0, i1;
  double frac;
};

inline std::vector<UpsampleTap> upsample_taps(std::size_t in, std::size_t factor) {
  std::vector<UpsampleTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}

template <typename T>
BasicTensor<T> upsample_forward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x) {
  require_spatial(index, l, x);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = upsample_taps(h, l.factor), tx = upsample_taps(w, l.factor);
  const std::size_t ho = ty.size(), wo = tx.size();
  BasicTensor<T> y({n, c, ho, wo});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.raw() + p * h * w;
    T* dst = y.raw() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * w + b.i0] * (1.0 - b.frac) + src[a.i0 * w + b.i1] * b.frac;
        const double bot = src[a.i1 * w + b.i0] * (1.0 - b.frac) + src[a.i1 * w + b.i1] * b.frac;
        dst[oy * wo + ox] = static_cast<T>(top * (1.0 - a.frac) + bot * a.frac);
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> upsample_backward(const LayerSpec& l, const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = upsample_taps(h, l.factor), tx = upsample_taps(w, l.factor);
  const std::size_t ho = ty.size(), wo = tx.size();
  BasicTensor<T> dx(x.shape());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* g = dy.raw() + p * ho * wo;
    T* d = dx.raw() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& b = tx[ox];
        const double v = g[oy * wo + ox];
        d[a.i0 * w + b.i0] += static_cast<T>(v * (1.0 - a.frac) * (1.0 - b.frac));
        d[a.i0 * w + b.i1] += static_cast<T>(v * (1.0 - a.frac) * b.frac);
        d[a.i1 * w + b.i0] += static_cast<T>(v * a.frac * (1.0 - b.frac));
        d[a.i1 * w + b.i1] += static_cast<T>(v * a.frac * b.frac);
      }
    }
  }
  return dx;
}

// Softmax over dimension 1 (classes / channels), independently per sample and pixel.
template <typename T>
BasicTensor<T> softmax_forward(std::size_t index, const LayerSpec& l, const BasicTensor<T>& x) {
  if (x.rank() != 2 && x.rank() != 4)
    layer_shape_error(index, l, "expected rank 2 or 4 input, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < inner; ++s) {
      const std::size_t base = i * c * inner + s;
      double mx = x[base];
      for (std::size_t k = 1; k < c; ++k) mx = std::max<double>(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) z += std::exp(static_cast<double>(x[base + k * inner]) - mx);
      for (std::size_t k = 0; k < c; ++k)
        y[base + k * inner] = static_cast<T>(std::exp(static_cast<double>(x[base + k * inner]) - mx) / z);
    }
  return y;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& dy) {
  const std::size_t n = y.dim(0), c = y.dim(1), inner = y.size() / (n * c);
  BasicTensor<T> dx(y.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < inner; ++s) {
      const std::size_t base = i * c * inner + s;
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += static_cast<double>(dy[base + k * inner]) * y[base + k * inner];
      for (std::size_t k = 0; k < c; ++k)
        dx[base + k * inner] = static_cast<T>(y[base + k * inner] * (dy[base + k * inner] - dot));
    }
  return dx;
}

template <typename T>
T sigmoid(T v) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
}

struct ParamSlot {
  std::optional<std::size_t> weight;  // index into the parameter set
};

inline std::vector<ParamSlot> param_slots(std::span<const LayerSpec> layers) {
  std::vector<ParamSlot> slots(layers.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].has_params()) {
      slots[i].weight = next;
      next += 2;
    }
  return slots;
}

template <typename T>
void check_params(std::span<const LayerSpec> layers, const ParamSet<T>& params) {
  const auto shapes = param_shapes(layers);
  if (shapes.size() != params.size())
    throw ShapeError("parameter set holds " + std::to_string(params.size()) + " tensors, layers need " +
                     std::to_string(shapes.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (params[i].shape() != shapes[i])
      throw ShapeError("parameter " + std::to_string(i) + " has shape " + shape_string(params[i].shape()) +
                       ", expected " + shape_string(shapes[i]));
}

template <typename T>
BasicTensor<T> layer_forward(std::size_t index, const LayerSpec& l, const ParamSet<T>& params,
                             const ParamSlot& slot, const BasicTensor<T>& x, std::vector<std::size_t>* argmax,
                             std::vector<T>* cols) {
  switch (l.kind) {
    case LayerKind::conv2d: {
      std::vector<T> scratch;
      return conv_forward(index, l, x, params[*slot.weight], params[*slot.weight + 1], cols ? *cols : scratch);
    }
    case LayerKind::linear:
      return linear_forward(index, l, x, params[*slot.weight], params[*slot.weight + 1]);
    case LayerKind::relu: {
      BasicTensor<T> y = x;
      for (auto& v : y.data()) v = v > T{0} ? v : T{0};
      return y;
    }
    case LayerKind::sigmoid: {
      BasicTensor<T> y = x;
      for (auto& v : y.data()) v = sigmoid(v);
      return y;
    }
    case LayerKind::maxpool2:
      return maxpool_forward(index, l, x, argmax);
    case LayerKind::global_avg_pool:
      return global_avg_pool_forward(index, l, x);
    case LayerKind::bilinear_upsample:
      return upsample_forward(index, l, x);
    case LayerKind::softmax:
      return softmax_forward(index, l, x);
  }
  layer_shape_error(index, l, "unsupported layer");
}

}  // namespace detail

// Runs the network and keeps every intermediate activation for backward().
template <typename T>
Trace<T> forward(std::span<const LayerSpec> layers, const ParamSet<T>& params, const BasicTensor<T>& input) {
  validate_layers(layers);
  detail::check_params(layers, params);
  if (layers.empty()) throw ValidationError("network has no layers");
  const auto slots = detail::param_slots(layers);
  Trace<T> trace;
  trace.layers.assign(layers.begin(), layers.end());
  trace.pool_argmax.resize(layers.size());
  trace.conv_cols.resize(layers.size());
  trace.activations.reserve(layers.size() + 1);
  trace.activations.push_back(input);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto* argmax = layers[i].kind == LayerKind::maxpool2 ? &trace.pool_argmax[i] : nullptr;
    trace.activations.push_back(
        detail::layer_forward(i, layers[i], params, slots[i], trace.activations.back(), argmax,
                              &trace.conv_cols[i]));
  }
  return trace;
}

// Forward pass without retaining a trace.
template <typename T>
BasicTensor<T> infer(std::span<const LayerSpec> layers, const ParamSet<T>& params, const BasicTensor<T>& input) {
  validate_layers(layers);
  detail::check_params(layers, params);
  if (layers.empty()) throw ValidationError("network has no layers");
  const auto slots = detail::param_slots(layers);
  BasicTensor<T> x = input;
  for (std::size_t i = 0; i < layers.size(); ++i) x = detail::layer_forward<T>(i, layers[i], params, slots[i], x, nullptr, nullptr);
  return x;
}

// With need_input_grad false the first conv skips its input gradient and
// Gradients::input is left empty.
template <typename T>
Gradients<T> backward(const Trace<T>& trace, const ParamSet<T>& params, const BasicTensor<T>& output_grad,
                      bool need_input_grad = true) {
  if (!trace.complete()) throw Error("backward called without a completed forward trace");
  const auto& layers = trace.layers;
  detail::check_params(std::span<const LayerSpec>(layers), params);
  if (output_grad.shape() != trace.output().shape())
    throw ShapeError("output gradient shape " + shape_string(output_grad.shape()) + " does not match output " +
                     shape_string(trace.output().shape()));
  const auto slots = detail::param_slots(layers);
  Gradients<T> grads;
  for (const auto& p : params) grads.params.emplace_back(p.shape(), T{0});

  BasicTensor<T> g = output_grad;
  for (std::size_t idx = layers.size(); idx-- > 0;) {
    const auto& l = layers[idx];
    const auto& x = trace.activations[idx];
    const auto& y = trace.activations[idx + 1];
    switch (l.kind) {
      case LayerKind::conv2d: {
        const std::size_t wi = *slots[idx].weight;
        g = detail::conv_backward(idx, l, x, trace.conv_cols[idx], params[wi], g, grads.params[wi],
                                  grads.params[wi + 1], need_input_grad || idx > 0);
        if (g.empty()) {
          grads.input = {};
          return grads;
        }
        break;
      }
      case LayerKind::linear: {
        const std::size_t wi = *slots[idx].weight;
        const std::size_t n = x.dim(0);
        auto& dw = grads.params[wi];
        auto& db = grads.params[wi + 1];
        detail::gemm<T>(true, false, l.out_channels, l.in_channels, n, T{1}, g.raw(), l.out_channels, x.raw(),
                        l.in_channels, T{0}, dw.raw(), l.in_channels);
        for (std::size_t o = 0; o < l.out_channels; ++o) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += g[i * l.out_channels + o];
          db[o] = static_cast<T>(acc);
        }
        BasicTensor<T> dx(x.shape());
        detail::gemm<T>(false, false, n, l.in_channels, l.out_channels, T{1}, g.raw(), l.out_channels,
                        params[wi].raw(), l.in_channels, T{0}, dx.raw(), l.in_channels);
        g = std::move(dx);
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(x[i] > T{0})) g[i] = T{0};
        break;
      case LayerKind::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] * y[i] * (T{1} - y[i]);
        break;
      case LayerKind::maxpool2: {
        BasicTensor<T> dx(x.shape());
        const auto& argmax = trace.pool_argmax[idx];
        for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
        g = std::move(dx);
        break;
      }
      case LayerKind::global_avg_pool: {
        BasicTensor<T> dx(x.shape());
        const std::size_t hw = x.dim(2) * x.dim(3);
        for (std::size_t p = 0; p < g.size(); ++p) {
          const T v = static_cast<T>(g[p] / static_cast<double>(hw));
          for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] = v;
        }
        g = std::move(dx);
        break;
      }
      case LayerKind::bilinear_upsample:
        g = detail::upsample_backward(l, x, g);
        break;
      case LayerKind::softmax:
        g = detail::softmax_backward(y, g);
        break;
    }
  }
  grads.input = std::move(g);
  return grads;
}

}  // namespace oaid
