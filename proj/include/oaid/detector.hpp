#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "oaid/error.hpp"
#include "oaid/imaging.hpp"
#include "oaid/layers.hpp"
#include "oaid/metrics.hpp"
#include "oaid/tensor.hpp"

namespace oaid {

enum class HeadKind { whole_image, pixel };

inline std::string head_name(HeadKind h) { return h == HeadKind::whole_image ? "whole_image" : "pixel"; }

inline HeadKind head_from_name(const std::string& s) {
  if (s == "whole_image") return HeadKind::whole_image;
  if (s == "pixel") return HeadKind::pixel;
  throw ValidationError("unknown head kind '" + s + "'");
}

// What the network sees. `residual` subtracts each pixel's 3x3 neighbourhood
// mean (edges replicated) and scales by kResidualGain: generator fingerprints
// live in the high frequencies, and removing scene content lets a small net
// find them in a few epochs. `centered` is the plain image minus 0.5.
enum class InputFilter { centered, residual };

inline constexpr float kResidualGain = 4.0f;

inline std::string filter_name(InputFilter f) { return f == InputFilter::centered ? "centered" : "residual"; }

inline InputFilter filter_from_name(const std::string& s) {
  if (s == "centered") return InputFilter::centered;
  if (s == "residual") return InputFilter::residual;
  throw ValidationError("unknown input filter '" + s + "'");
}

struct DetectorModel {
  HeadKind head = HeadKind::whole_image;
  std::vector<LayerSpec> layers;
  ParamSet<float> params;
  std::size_t stage = 0;  // last training stage applied
  std::size_t input_size = 0;
  InputFilter input_filter = InputFilter::residual;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

// Replicate padding keeps a constant image constant through every conv, so
// borders do not imprint a spatial pattern on untrained score maps.
inline std::vector<LayerSpec> mini_encoder() {
  using L = LayerSpec;
  constexpr auto rep = PadMode::replicate;
  return {L::conv(3, 16, 3, 1, 1, rep),  L::of(LayerKind::relu), L::of(LayerKind::maxpool2),
          L::conv(16, 32, 3, 1, 1, rep), L::of(LayerKind::relu), L::of(LayerKind::maxpool2),
          L::conv(32, 64, 3, 1, 1, rep), L::of(LayerKind::relu), L::of(LayerKind::maxpool2)};
}

}  // namespace detail

inline DetectorModel build_whole_image_net(std::size_t input_size, std::uint64_t seed = 0) {
  if (input_size < 32) throw ValidationError("whole-image net needs input_size >= 32");
  DetectorModel m;
  m.head = HeadKind::whole_image;
  m.input_size = input_size;
  m.layers = detail::mini_encoder();
  m.layers.push_back(LayerSpec::conv(64, 64, 3, 1, 1, PadMode::replicate));
  m.layers.push_back(LayerSpec::of(LayerKind::relu));
  m.layers.push_back(LayerSpec::of(LayerKind::global_avg_pool));
  m.layers.push_back(LayerSpec::linear(64, 2));
  m.params = init_params<float>(m.layers, seed);
  return m;
}

inline DetectorModel build_pixel_net(std::size_t input_size, std::uint64_t seed = 0) {
  if (input_size == 0 || input_size % 8 != 0)
    throw ValidationError("pixel net input_size must be a positive multiple of 8, got " + std::to_string(input_size));
  DetectorModel m;
  m.head = HeadKind::pixel;
  m.input_size = input_size;
  m.layers = detail::mini_encoder();
  m.layers.push_back(LayerSpec::conv(64, 1, 1, 0));
  m.layers.push_back(LayerSpec::upsample(8));
  m.layers.push_back(LayerSpec::of(LayerKind::sigmoid));
  m.params = init_params<float>(m.layers, seed);
  return m;
}

// N x 3 x H x W batch. Single-channel images are replicated to three channels.
inline Tensor images_to_tensor(std::span<const ImageBuffer> images, InputFilter filter = InputFilter::residual) {
  if (images.empty()) throw ValidationError("empty image batch");
  const std::size_t h = images[0].height(), w = images[0].width();
  Tensor t({images.size(), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.height() != h || img.width() != w) throw ShapeError("images in a batch must share dimensions");
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t src = img.channels() == 1 ? 0 : c;
      float* dst = t.raw() + ((n * 3 + c) * h) * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const float v = img.at(y, x, src);
          if (filter == InputFilter::centered) {
            dst[y * w + x] = v - 0.5f;
            continue;
          }
          float acc = 0.0f;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) + dy, 0,
                                                         static_cast<std::ptrdiff_t>(h) - 1);
              const auto xx = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + dx, 0,
                                                         static_cast<std::ptrdiff_t>(w) - 1);
              acc += img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), src);
            }
          dst[y * w + x] = kResidualGain * (v - acc / 9.0f);
        }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct LossResult {
  double value = 0.0;
  BasicTensor<T> grad;  // d value / d input
};

// Mean over the batch of -log softmax(logits)[label]; labels 0 = real, 1 = synthetic.
template <typename T>
LossResult<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw ShapeError("cross entropy expects (N,2) logits");
  const std::size_t n = logits.dim(0);
  if (labels.size() != n) throw ShapeError("label count does not match batch size");
  LossResult<T> r{0.0, BasicTensor<T>(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("labels must be 0 (real) or 1 (synthetic)");
    const double a = logits[i * 2], b = logits[i * 2 + 1];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    const double p1 = std::exp(b - lse);
    r.value += lse - (labels[i] ? b : a);
    r.grad[i * 2] = static_cast<T>(((1.0 - p1) - (labels[i] == 0 ? 1.0 : 0.0)) / static_cast<double>(n));
    r.grad[i * 2 + 1] = static_cast<T>((p1 - (labels[i] == 1 ? 1.0 : 0.0)) / static_cast<double>(n));
  }
  r.value /= static_cast<double>(n);
  return r;
}

// Two-class generalized Dice with class weights 1 / (volume + eps)^2 computed
// over the whole batch. The reported value is clamped to [0, 1] (eps can push a
// perfect prediction a hair below zero); the gradient is that of the unclamped
// expression.
template <typename T>
LossResult<T> weighted_dice_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double eps = 1e-6) {
  if (pred.shape() != target.shape())
    throw ShapeError("dice: prediction " + shape_string(pred.shape()) + " vs target " + shape_string(target.shape()));
  double g_fg = 0.0, p_fg = 0.0, pg_fg = 0.0, pg_bg = 0.0;
  const std::size_t n = pred.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = target[i], p = pred[i];
    if (g != 0.0 && g != 1.0) throw ValidationError("dice target must be binary");
    g_fg += g;
    p_fg += p;
    pg_fg += p * g;
    pg_bg += (1.0 - p) * (1.0 - g);
  }
  const double g_bg = static_cast<double>(n) - g_fg;
  const double p_bg = static_cast<double>(n) - p_fg;
  const double w_fg = 1.0 / ((g_fg + eps) * (g_fg + eps));
  const double w_bg = 1.0 / ((g_bg + eps) * (g_bg + eps));
  const double inter = w_fg * pg_fg + w_bg * pg_bg + eps;
  const double uni = w_fg * (p_fg + g_fg) + w_bg * (p_bg + g_bg) + eps;
  LossResult<T> r{std::clamp(1.0 - 2.0 * inter / uni, 0.0, 1.0), BasicTensor<T>(pred.shape())};
  const double d_uni = w_fg - w_bg;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = target[i];
    const double d_inter = w_fg * g - w_bg * (1.0 - g);
    r.grad[i] = static_cast<T>(-2.0 * (d_inter * uni - inter * d_uni) / (uni * uni));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Inference

inline void require_head(const DetectorModel& m, HeadKind h, const char* what) {
  if (m.head != h) throw ValidationError(std::string(what) + " needs a " + head_name(h) + " model, got " + head_name(m.head));
}

inline double score_from_logits(double real_logit, double fake_logit) {
  return 1.0 / (1.0 + std::exp(real_logit - fake_logit));
}

// Probability of the synthetic class for each image (already eval-transformed).
inline std::vector<double> predict_scores(const DetectorModel& m, std::span<const ImageBuffer> images,
                                          std::size_t batch = 64) {
  require_head(m, HeadKind::whole_image, "predict_score");
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t s = 0; s < images.size(); s += batch) {
    const auto chunk = images.subspan(s, std::min(batch, images.size() - s));
    const Tensor logits = infer<float>(m.layers, m.params, images_to_tensor(chunk, m.input_filter));
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(score_from_logits(logits[i * 2], logits[i * 2 + 1]));
  }
  return out;
}

inline double predict_score(const DetectorModel& m, const ImageBuffer& image) {
  return predict_scores(m, std::span<const ImageBuffer>(&image, 1)).front();
}

// Per-pixel synthetic probability maps, one Plane per image.
inline std::vector<Plane> predict_masks(const DetectorModel& m, std::span<const ImageBuffer> images,
                                        std::size_t batch = 32) {
  require_head(m, HeadKind::pixel, "predict_mask");
  std::vector<Plane> out;
  out.reserve(images.size());
  for (std::size_t s = 0; s < images.size(); s += batch) {
    const auto chunk = images.subspan(s, std::min(batch, images.size() - s));
    const Tensor maps = infer<float>(m.layers, m.params, images_to_tensor(chunk, m.input_filter));
    const std::size_t h = maps.dim(2), w = maps.dim(3);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Plane p(h, w);
      for (std::size_t k = 0; k < h * w; ++k) p.values[k] = maps[i * h * w + k];
      out.push_back(std::move(p));
    }
  }
  return out;
}

// Positive class = generated pixel. Precision/recall are 0 (and flagged) when
// their denominators are empty.
inline ClassificationMetrics pixel_metrics(std::span<const double> pred, std::span<const double> target,
                                           double threshold = 0.5) {
  if (pred.size() != target.size()) throw ShapeError("pixel_metrics: prediction and target sizes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) c.add(pred[i] > threshold, target[i] > 0.5);
  return c.metrics();
}

// ---------------------------------------------------------------------------
// Checkpoints: "OAID" | u16 version | u32 descriptor length | descriptor JSON |
// f32 parameter blob (descriptor order) | u32 stage. All integers little endian.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  return {{"kind", std::string(kind_name(l.kind))},
          {"in_channels", l.in_channels},
          {"out_channels", l.out_channels},
          {"kernel", l.kernel},
          {"stride", l.stride},
          {"padding", l.padding},
          {"pad_mode", l.pad_mode == PadMode::zeros ? "zeros" : "replicate"},
          {"factor", l.factor}};
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec l;
  l.kind = kind_from_name(j.at("kind").get<std::string>());
  l.in_channels = j.at("in_channels");
  l.out_channels = j.at("out_channels");
  l.kernel = j.at("kernel");
  l.stride = j.at("stride");
  l.padding = j.at("padding");
  l.pad_mode = j.at("pad_mode").get<std::string>() == "replicate" ? PadMode::replicate : PadMode::zeros;
  l.factor = j.at("factor");
  return l;
}

inline nlohmann::json model_descriptor(const DetectorModel& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) layers.push_back(layer_to_json(l));
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : m.params) shapes.push_back(p.shape());
  return {{"head", head_name(m.head)},
          {"input_size", m.input_size},
          {"input_filter", filter_name(m.input_filter)},
          {"layers", layers},
          {"param_shapes", shapes},
          {"metadata", m.metadata}};
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename U>
void put(std::string& buf, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  buf.append(bytes, sizeof(U));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& file;

  void need(std::size_t n) const {
    if (buf.size() - pos < n) throw IoError("checkpoint '" + file + "' is truncated");
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
};

// Write to a sibling temp file, then rename, so readers never see a partial file.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::string serialize_model(const DetectorModel& m) {
  const std::string desc = model_descriptor(m).dump();
  std::string buf = "OAID";
  detail::put<std::uint16_t>(buf, kCheckpointVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(desc.size()));
  buf += desc;
  for (const auto& p : m.params)
    buf.append(reinterpret_cast<const char*>(p.raw()), p.size() * sizeof(float));
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.stage));
  return buf;
}

inline DetectorModel deserialize_model(const std::string& buf, const std::string& name = "<memory>") {
  detail::Reader r{buf, 0, name};
  r.need(4);
  if (buf.compare(0, 4, "OAID") != 0) throw IoError("checkpoint '" + name + "' has bad magic bytes");
  r.pos = 4;
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint '" + name + "' has format version " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  const auto len = r.get<std::uint32_t>();
  r.need(len);
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(buf.substr(r.pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + name + "' has a corrupt descriptor: " + e.what());
  }
  r.pos += len;
  DetectorModel m;
  try {
    m.head = head_from_name(desc.at("head"));
    m.input_size = desc.at("input_size");
    m.input_filter = filter_from_name(desc.at("input_filter"));
    for (const auto& l : desc.at("layers")) m.layers.push_back(layer_from_json(l));
    m.metadata = desc.value("metadata", nlohmann::json::object());
    validate_layers(m.layers);
    const auto shapes = param_shapes(m.layers);
    if (desc.at("param_shapes").get<std::vector<Shape>>() != shapes)
      throw IoError("checkpoint '" + name + "' parameter shapes disagree with its layers");
    for (const auto& s : shapes) {
      Tensor t(s);
      r.need(t.size() * sizeof(float));
      std::memcpy(t.raw(), buf.data() + r.pos, t.size() * sizeof(float));
      r.pos += t.size() * sizeof(float);
      m.params.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + name + "' has a malformed descriptor: " + e.what());
  }
  m.stage = r.get<std::uint32_t>();
  if (r.pos != buf.size()) throw IoError("checkpoint '" + name + "' has trailing bytes");
  return m;
}

inline void save_model(const DetectorModel& m, const std::filesystem::path& path) {
  detail::write_atomic(path, serialize_model(m));
}

inline DetectorModel load_model(const std::filesystem::path& path) {
  return deserialize_model(detail::read_all(path), path.string());
}

}  // namespace oaid
