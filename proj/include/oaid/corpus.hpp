#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "oaid/error.hpp"
#include "oaid/imaging.hpp"
#include "oaid/parallel.hpp"
#include "oaid/png_io.hpp"
#include "oaid/rng.hpp"

namespace oaid {

// ---------------------------------------------------------------------------
// Fingerprints

struct UpsampleArtifact {
  std::size_t factor = 2;
  double alpha = 0.5;  // blend weight of the down/up-sampled copy
};

struct SpectralSpike {
  double fx = 8.0;  // cycles per image, horizontal
  double fy = 8.0;  // cycles per image, vertical
  double amplitude = 0.03;
};

struct DctQuantization {
  double table_scale = 1.0;  // multiplier on the JPEG luminance table
};

using ChannelMix = std::array<std::array<double, 3>, 3>;

// Detectable generator cues, applied as channel_mix -> dct_quantization ->
// upsample_artifact -> spectral_spike. Absent members are disabled.
struct FingerprintSpec {
  std::string family;
  std::optional<ChannelMix> channel_mix;
  std::optional<DctQuantization> dct_quantization;
  std::optional<UpsampleArtifact> upsample_artifact;
  std::optional<SpectralSpike> spectral_spike;

  bool is_identity() const {
    return !channel_mix && !dct_quantization && !upsample_artifact && !spectral_spike;
  }

  void validate() const {
    if (upsample_artifact) {
      if (!(upsample_artifact->alpha >= 0.0 && upsample_artifact->alpha <= 1.0))
        throw ValidationError("upsample_artifact.alpha must lie in [0,1]");
      if (upsample_artifact->factor < 1) throw ValidationError("upsample_artifact.factor must be positive");
    }
    if (spectral_spike && !(std::abs(spectral_spike->amplitude) <= 0.1))
      throw ValidationError("spectral_spike.amplitude must not exceed 0.1");
    if (dct_quantization && !(dct_quantization->table_scale > 0.0))
      throw ValidationError("dct_quantization.table_scale must be positive");
    if (channel_mix)
      for (const auto& row : *channel_mix) {
        const double s = row[0] + row[1] + row[2];
        if (!(std::abs(s - 1.0) <= 0.2)) throw ValidationError("channel_mix rows must sum to 1 +- 0.2");
      }
  }
};

// Same family, every continuous parameter scaled by an independent factor in
// [1 - spread, 1 + spread]. Spike frequencies are kept on the integer grid.
inline FingerprintSpec perturb_fingerprint(const FingerprintSpec& base, double spread, Rng& rng) {
  FingerprintSpec fp = base;
  auto jitter = [&](double v) { return v * uniform(rng, 1.0 - spread, 1.0 + spread); };
  if (fp.channel_mix)
    for (auto& row : *fp.channel_mix)
      for (std::size_t c = 0; c < 3; ++c) {
        const double ident = row[c];
        if (std::abs(ident) > 0.0 && std::abs(ident) < 0.5) row[c] = jitter(ident);
      }
  if (fp.dct_quantization) fp.dct_quantization->table_scale = jitter(fp.dct_quantization->table_scale);
  if (fp.upsample_artifact) fp.upsample_artifact->alpha = std::clamp(jitter(fp.upsample_artifact->alpha), 0.0, 1.0);
  if (fp.spectral_spike) {
    fp.spectral_spike->fx = std::round(jitter(fp.spectral_spike->fx));
    fp.spectral_spike->fy = std::round(jitter(fp.spectral_spike->fy));
    fp.spectral_spike->amplitude = std::min(jitter(fp.spectral_spike->amplitude), 0.1);
  }
  fp.validate();
  return fp;
}

// ---------------------------------------------------------------------------
// Procedural images

// Sum of `octaves` value-noise layers; layer o has base_cells * 2^o cells per
// side and weight persistence^o. Output normalised to [0,1].
inline Plane value_noise(Rng& rng, std::size_t height, std::size_t width, std::size_t base_cells = 4,
                         std::size_t octaves = 4, double persistence = 0.5) {
  Plane out(height, width);
  double amp = 1.0, total = 0.0;
  for (std::size_t o = 0; o < octaves; ++o) {
    const std::size_t cells = base_cells << o;
    std::vector<double> lattice((cells + 1) * (cells + 1));
    for (auto& v : lattice) v = uniform(rng, 0.0, 1.0);
    for (std::size_t y = 0; y < height; ++y) {
      const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(height) * static_cast<double>(cells);
      const auto y0 = std::min(static_cast<std::size_t>(gy), cells - 1);
      double ty = gy - static_cast<double>(y0);
      ty = ty * ty * (3.0 - 2.0 * ty);
      for (std::size_t x = 0; x < width; ++x) {
        const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(width) * static_cast<double>(cells);
        const auto x0 = std::min(static_cast<std::size_t>(gx), cells - 1);
        double tx = gx - static_cast<double>(x0);
        tx = tx * tx * (3.0 - 2.0 * tx);
        const double a = lattice[y0 * (cells + 1) + x0], b = lattice[y0 * (cells + 1) + x0 + 1];
        const double c = lattice[(y0 + 1) * (cells + 1) + x0], d = lattice[(y0 + 1) * (cells + 1) + x0 + 1];
        out(y, x) += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
      }
    }
    total += amp;
    amp *= persistence;
  }
  for (auto& v : out.values) v /= total;
  return out;
}

// Stand-in for camera photographs: palette-mapped octave noise with a few soft
// shaded ellipses on top, quantized to 8 bits.
inline ImageBuffer synth_real_image(Rng& rng, std::size_t size) {
  if (size < 32) throw ValidationError("synthetic images need size >= 32");
  std::array<std::array<double, 3>, 3> palette{};
  for (auto& col : palette)
    for (auto& v : col) v = uniform(rng, 0.05, 0.95);
  const double contrast = uniform(rng, 1.5, 2.5);
  const Plane noise = value_noise(rng, size, size);
  std::vector<double> rgb(size * size * 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    const double t = std::clamp((noise.values[i] - 0.5) * contrast + 0.5, 0.0, 1.0);
    const auto& lo = t < 0.5 ? palette[0] : palette[1];
    const auto& hi = t < 0.5 ? palette[1] : palette[2];
    const double f = t < 0.5 ? 2.0 * t : 2.0 * t - 1.0;
    for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = lo[c] * (1.0 - f) + hi[c] * f;
  }
  const std::size_t shapes = uniform_index(rng, 1, 4);
  const double s = static_cast<double>(size);
  for (std::size_t k = 0; k < shapes; ++k) {
    const double cy = uniform(rng, 0.0, s), cx = uniform(rng, 0.0, s);
    const double ry = uniform(rng, 0.08, 0.3) * s, rx = uniform(rng, 0.08, 0.3) * s;
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double opacity = uniform(rng, 0.6, 1.0);
    const double softness = uniform(rng, 1.0, 3.0);
    std::array<double, 3> color{};
    for (auto& v : color) v = uniform(rng, 0.05, 0.95);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const double u = (dx * ca + dy * sa) / rx, v = (-dx * sa + dy * ca) / ry;
        const double rho = std::sqrt(u * u + v * v);
        const double edge = std::clamp((1.0 - rho) * std::min(rx, ry) / softness, 0.0, 1.0);
        if (edge <= 0.0) continue;
        const double a = opacity * edge;
        const double shade = 1.0 - 0.3 * std::min(rho, 1.0);
        for (std::size_t c = 0; c < 3; ++c) {
          double& px = rgb[(y * size + x) * 3 + c];
          px = px * (1.0 - a) + color[c] * shade * a;
        }
      }
  }
  // Sensor grain, shared across channels like luminance noise.
  const double grain = uniform(rng, 0.015, 0.025);
  ImageBuffer img(size, size, 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    const double g = normal(rng, 0.0, grain);
    for (std::size_t c = 0; c < 3; ++c) img.set_index(i * 3 + c, rgb[i * 3 + c] + g);
  }
  return quantize_8bit(img);
}

namespace detail {

inline const std::array<std::array<double, 8>, 8>& jpeg_luma_table() {
  static const std::array<std::array<double, 8>, 8> table{{
      {16, 11, 10, 16, 24, 40, 51, 61},
      {12, 12, 14, 19, 26, 58, 60, 55},
      {14, 13, 16, 24, 40, 57, 69, 56},
      {14, 17, 22, 29, 51, 87, 80, 62},
      {18, 22, 37, 56, 68, 109, 103, 77},
      {24, 35, 55, 64, 81, 104, 113, 92},
      {49, 64, 78, 87, 103, 121, 120, 101},
      {72, 92, 95, 98, 112, 100, 103, 99},
  }};
  return table;
}

inline ImageBuffer apply_channel_mix(const ImageBuffer& img, const ChannelMix& mix) {
  if (img.channels() != 3) return img;
  ImageBuffer out(img.height(), img.width(), 3);
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.set(y, x, c,
                mix[c][0] * img.at(y, x, 0) + mix[c][1] * img.at(y, x, 1) + mix[c][2] * img.at(y, x, 2));
  return out;
}

inline ImageBuffer apply_dct_quantization(const ImageBuffer& img, const DctQuantization& q) {
  const auto& table = jpeg_luma_table();
  ImageBuffer out(img.height(), img.width(), img.channels());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    Plane coef = block_dct8(channel_plane(img, c));
    for (std::size_t y = 0; y < coef.height; ++y)
      for (std::size_t x = 0; x < coef.width; ++x) {
        const double step = table[y % 8][x % 8] / 255.0 * q.table_scale;
        coef(y, x) = std::round(coef(y, x) / step) * step;
      }
    const Plane back = block_idct8(coef);
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) out.set(y, x, c, back(y, x));
  }
  return out;
}

inline ImageBuffer apply_upsample_artifact(const ImageBuffer& img, const UpsampleArtifact& u) {
  const std::size_t f = u.factor, h = img.height(), w = img.width(), ch = img.channels();
  ImageBuffer out(h, w, ch);
  for (std::size_t by = 0; by < h; by += f)
    for (std::size_t bx = 0; bx < w; bx += f)
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t y = by; y < std::min(by + f, h); ++y)
          for (std::size_t x = bx; x < std::min(bx + f, w); ++x, ++n) acc += img.at(y, x, c);
        const double box = acc / static_cast<double>(n);
        for (std::size_t y = by; y < std::min(by + f, h); ++y)
          for (std::size_t x = bx; x < std::min(bx + f, w); ++x)
            out.set(y, x, c, (1.0 - u.alpha) * img.at(y, x, c) + u.alpha * box);
      }
  return out;
}

inline ImageBuffer apply_spectral_spike(const ImageBuffer& img, const SpectralSpike& s, double phase) {
  ImageBuffer out(img.height(), img.width(), img.channels());
  const double h = static_cast<double>(img.height()), w = static_cast<double>(img.width());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      const double wave =
          s.amplitude * std::cos(2.0 * std::numbers::pi * (s.fx * static_cast<double>(x) / w +
                                                           s.fy * static_cast<double>(y) / h) + phase);
      for (std::size_t c = 0; c < img.channels(); ++c) out.set(y, x, c, img.at(y, x, c) + wave);
    }
  return out;
}

}  // namespace detail

// Applies the enabled fingerprint stages in their fixed order. The spike phase
// is the only random draw and is taken whether or not the spike is enabled.
inline ImageBuffer apply_fingerprint(const ImageBuffer& img, const FingerprintSpec& fp, Rng& rng) {
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  if (fp.is_identity()) return img;
  ImageBuffer out = img;
  if (fp.channel_mix) out = detail::apply_channel_mix(out, *fp.channel_mix);
  if (fp.dct_quantization) out = detail::apply_dct_quantization(out, *fp.dct_quantization);
  if (fp.upsample_artifact) out = detail::apply_upsample_artifact(out, *fp.upsample_artifact);
  if (fp.spectral_spike) out = detail::apply_spectral_spike(out, *fp.spectral_spike, phase);
  return out;
}

inline ImageBuffer synth_generated_image(Rng& rng, std::size_t size, const FingerprintSpec& fp) {
  fp.validate();
  ImageBuffer base = synth_real_image(rng, size);
  if (fp.is_identity()) return base;
  return quantize_8bit(apply_fingerprint(base, fp, rng));
}

// ---------------------------------------------------------------------------
// Sources, manifest, timeline

enum class SourceKind { real, generated };
enum class Split { train, val, test };

inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::val, Split::test};

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& name) {
  for (Split s : kAllSplits)
    if (split_name(s) == name) return s;
  throw ValidationError("unknown split '" + name + "'");
}

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t of(Split s) const { return s == Split::train ? train : s == Split::val ? val : test; }
  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

struct GeneratorSource {
  std::string id;
  std::string name;
  std::string release_date;  // YYYY-MM
  std::size_t order = 0;     // 1-based position on the timeline; 0 for the real source
  SourceKind kind = SourceKind::generated;
  std::optional<FingerprintSpec> fingerprint;
  std::optional<std::filesystem::path> dir;
  SplitCounts counts;
};

// Months since year 0, or nullopt when the string is not YYYY-MM.
inline std::optional<int> parse_release_date(const std::string& s) {
  if (s.size() != 7 || s[4] != '-') return std::nullopt;
  for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u})
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
  const int year = std::stoi(s.substr(0, 4)), month = std::stoi(s.substr(5, 2));
  if (month < 1 || month > 12) return std::nullopt;
  return year * 12 + (month - 1);
}

struct Manifest {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  GeneratorSource real;
  std::vector<GeneratorSource> sources;

  const GeneratorSource& source(const std::string& id) const {
    if (real.id == id) return real;
    for (const auto& s : sources)
      if (s.id == id) return s;
    throw ValidationError("manifest has no source '" + id + "'");
  }

  void validate() const {
    if (image_size < 32) throw ValidationError("manifest image_size must be at least 32");
    std::vector<std::string> ids{real.id};
    auto check_backing = [](const GeneratorSource& s) {
      if (s.id.empty()) throw ValidationError("source with empty id");
      if (s.fingerprint.has_value() == s.dir.has_value())
        throw ValidationError("source '" + s.id + "' needs exactly one of fingerprint/dir");
      if (s.fingerprint) s.fingerprint->validate();
    };
    if (real.kind != SourceKind::real) throw ValidationError("manifest real source must have kind 'real'");
    check_backing(real);
    if (real.fingerprint && !real.fingerprint->is_identity())
      throw ValidationError("real source '" + real.id + "' cannot carry a fingerprint");
    for (const auto& s : sources) {
      check_backing(s);
      if (s.kind != SourceKind::generated)
        throw ValidationError("source '" + s.id + "' in sources list must have kind 'generated'");
      if (std::find(ids.begin(), ids.end(), s.id) != ids.end())
        throw ValidationError("duplicate source id '" + s.id + "'");
      ids.push_back(s.id);
      if (!parse_release_date(s.release_date))
        throw ValidationError("source '" + s.id + "' has no valid release_date (YYYY-MM)");
    }
    if (sources.empty()) throw ValidationError("manifest lists no generated sources");
  }
};

struct Timeline {
  GeneratorSource real;
  std::vector<GeneratorSource> generated;  // release order, order == index + 1
  std::vector<std::string> warnings;

  std::size_t size() const { return generated.size(); }
  const GeneratorSource& at_stage(std::size_t k) const { return generated.at(k - 1); }
};

// Stable sort on release date; equal dates keep manifest order and produce a warning.
inline Timeline build_timeline(const Manifest& manifest) {
  manifest.validate();
  Timeline t;
  t.real = manifest.real;
  t.real.order = 0;
  t.generated = manifest.sources;
  std::stable_sort(t.generated.begin(), t.generated.end(), [](const auto& a, const auto& b) {
    return *parse_release_date(a.release_date) < *parse_release_date(b.release_date);
  });
  for (std::size_t i = 0; i < t.generated.size(); ++i) {
    t.generated[i].order = i + 1;
    if (i > 0 && t.generated[i].release_date == t.generated[i - 1].release_date)
      t.warnings.push_back("sources '" + t.generated[i - 1].id + "' and '" + t.generated[i].id +
                           "' share release date " + t.generated[i].release_date + "; keeping manifest order");
  }
  return t;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json fingerprint_to_json(const FingerprintSpec& fp) {
  nlohmann::json j = nlohmann::json::object();
  if (!fp.family.empty()) j["family"] = fp.family;
  if (fp.channel_mix) j["channel_mix"] = *fp.channel_mix;
  if (fp.dct_quantization) j["dct_quantization"] = {{"table_scale", fp.dct_quantization->table_scale}};
  if (fp.upsample_artifact)
    j["upsample_artifact"] = {{"factor", fp.upsample_artifact->factor}, {"alpha", fp.upsample_artifact->alpha}};
  if (fp.spectral_spike)
    j["spectral_spike"] = {{"fx", fp.spectral_spike->fx},
                           {"fy", fp.spectral_spike->fy},
                           {"amplitude", fp.spectral_spike->amplitude}};
  return j;
}

inline FingerprintSpec fingerprint_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("fingerprint must be an object");
  FingerprintSpec fp;
  fp.family = j.value("family", "");
  if (j.contains("channel_mix")) fp.channel_mix = j.at("channel_mix").get<ChannelMix>();
  if (j.contains("dct_quantization")) fp.dct_quantization = DctQuantization{j.at("dct_quantization").at("table_scale")};
  if (j.contains("upsample_artifact"))
    fp.upsample_artifact = UpsampleArtifact{j.at("upsample_artifact").at("factor").get<std::size_t>(),
                                            j.at("upsample_artifact").at("alpha").get<double>()};
  if (j.contains("spectral_spike"))
    fp.spectral_spike = SpectralSpike{j.at("spectral_spike").at("fx"), j.at("spectral_spike").at("fy"),
                                      j.at("spectral_spike").at("amplitude")};
  fp.validate();
  return fp;
}

inline nlohmann::json source_to_json(const GeneratorSource& s) {
  nlohmann::json j{{"id", s.id},
                   {"name", s.name},
                   {"release_date", s.release_date},
                   {"kind", s.kind == SourceKind::real ? "real" : "generated"},
                   {"counts", {{"train", s.counts.train}, {"val", s.counts.val}, {"test", s.counts.test}}}};
  if (s.order) j["order"] = s.order;
  if (s.fingerprint) j["fingerprint"] = fingerprint_to_json(*s.fingerprint);
  if (s.dir) j["dir"] = s.dir->string();
  return j;
}

inline GeneratorSource source_from_json(const nlohmann::json& j) {
  GeneratorSource s;
  s.id = j.at("id").get<std::string>();
  s.name = j.value("name", s.id);
  s.release_date = j.value("release_date", "");
  const std::string kind = j.value("kind", "generated");
  if (kind != "real" && kind != "generated") throw ValidationError("source '" + s.id + "' has unknown kind " + kind);
  s.kind = kind == "real" ? SourceKind::real : SourceKind::generated;
  if (j.contains("fingerprint")) s.fingerprint = fingerprint_from_json(j.at("fingerprint"));
  if (j.contains("dir")) s.dir = std::filesystem::path(j.at("dir").get<std::string>());
  const auto& c = j.at("counts");
  s.counts = {c.at("train").get<std::size_t>(), c.at("val").get<std::size_t>(), c.at("test").get<std::size_t>()};
  s.order = j.value("order", std::size_t{0});
  return s;
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& s : m.sources) sources.push_back(source_to_json(s));
  return {{"seed", m.seed}, {"image_size", m.image_size}, {"real", source_to_json(m.real)}, {"sources", sources}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.real = source_from_json(j.at("real"));
    for (const auto& s : j.at("sources")) m.sources.push_back(source_from_json(s));
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  Manifest m = manifest_from_json(j);
  // Relative source directories resolve against the manifest's location.
  auto resolve = [&](GeneratorSource& s) {
    if (s.dir && s.dir->is_relative()) s.dir = path.parent_path() / *s.dir;
  };
  resolve(m.real);
  for (auto& s : m.sources) resolve(s);
  return m;
}

// Six generated sources in three families of two versions each, 64x64 images,
// 400/50/100 images per split. Version-2 parameters sit within +-20% of version 1.
inline Manifest default_manifest(std::uint64_t seed = 1234) {
  Manifest m;
  m.seed = seed;
  m.image_size = 64;
  const SplitCounts counts{400, 50, 100};
  m.real = {"real", "procedural photographs", "2022-03", 0, SourceKind::real, FingerprintSpec{}, std::nullopt, counts};

  FingerprintSpec up1, up2, sp1, sp2, dq1, dq2;
  up1.family = up2.family = "upsampler";
  up1.upsample_artifact = UpsampleArtifact{2, 0.6};
  up2.upsample_artifact = UpsampleArtifact{2, 0.5};
  sp1.family = sp2.family = "periodic";
  sp1.spectral_spike = SpectralSpike{11, 5, 0.04};
  sp2.spectral_spike = SpectralSpike{13, 6, 0.048};
  dq1.family = dq2.family = "blockcodec";
  dq1.channel_mix = ChannelMix{{{0.92, 0.08, 0.0}, {0.0, 0.95, 0.05}, {0.04, 0.0, 0.96}}};
  dq1.dct_quantization = DctQuantization{1.0};
  dq2.channel_mix = ChannelMix{{{0.9, 0.1, 0.0}, {0.0, 0.94, 0.06}, {0.05, 0.0, 0.95}}};
  dq2.dct_quantization = DctQuantization{1.2};
  auto gen = [&](std::string id, std::string name, std::string date, FingerprintSpec fp) {
    return GeneratorSource{std::move(id), std::move(name), std::move(date), 0, SourceKind::generated,
                           std::move(fp), std::nullopt, counts};
  };
  m.sources = {gen("upsampler-v1", "Upsampler v1", "2020-06", up1),
               gen("periodic-v1", "Periodic v1", "2021-05", sp1),
               gen("blockcodec-v1", "Block codec v1", "2021-12", dq1),
               gen("upsampler-v2", "Upsampler v2", "2022-04", up2),
               gen("periodic-v2", "Periodic v2", "2022-08", sp2),
               gen("blockcodec-v2", "Block codec v2", "2023-03", dq2)};
  return m;
}

// ---------------------------------------------------------------------------
// Corpus access

inline std::uint64_t sample_seed(const Manifest& m, const GeneratorSource& s, Split split, std::size_t index) {
  return derive_seed(m.seed, s.id, split_name(split), index);
}

// Deterministic procedural sample; throws for directory-backed sources.
inline ImageBuffer synth_sample(const Manifest& m, const GeneratorSource& s, Split split, std::size_t index) {
  if (!s.fingerprint) throw ValidationError("source '" + s.id + "' is directory-backed");
  Rng rng{sample_seed(m, s, split, index)};
  return synth_generated_image(rng, m.image_size, *s.fingerprint);
}

inline std::string sample_filename(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", index);
  return buf;
}

inline std::vector<ImageBuffer> load_directory_split(const std::filesystem::path& dir, std::size_t count,
                                                     std::size_t image_size) {
  std::vector<ImageBuffer> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto path = dir / sample_filename(i);
    if (!std::filesystem::exists(path)) throw IoError("missing corpus image '" + path.string() + "'");
    auto img = load_png(path);
    if (img.height() < image_size || img.width() < image_size)
      throw ValidationError("corpus image '" + path.string() + "' is smaller than " + std::to_string(image_size));
    if (img.channels() == 1) {
      ImageBuffer rgb(img.height(), img.width(), 3);
      for (std::size_t y = 0; y < img.height(); ++y)
        for (std::size_t x = 0; x < img.width(); ++x)
          for (std::size_t c = 0; c < 3; ++c) rgb.set(y, x, c, img.at(y, x, 0));
      img = std::move(rgb);
    }
    out.push_back(std::move(img));
  }
  return out;
}

// Image provider over a manifest: reads a materialized corpus root when given,
// otherwise synthesizes procedural sources in memory (bit-identical to what
// materialize_corpus writes). Directory-backed sources always load from disk.
class Corpus {
public:
  explicit Corpus(Manifest manifest, std::optional<std::filesystem::path> root = std::nullopt,
                  std::size_t threads = 1)
      : manifest_(std::move(manifest)), root_(std::move(root)), threads_(threads) {
    manifest_.validate();
  }

  const Manifest& manifest() const { return manifest_; }

  const std::vector<ImageBuffer>& images(const std::string& source_id, Split split) const {
    std::lock_guard lock(mutex_);
    const auto key = source_id + "/" + split_name(split);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const auto& s = manifest_.source(source_id);
    const std::size_t n = s.counts.of(split);
    std::vector<ImageBuffer> imgs;
    if (s.dir) {
      imgs = load_directory_split(*s.dir / split_name(split), n, manifest_.image_size);
    } else if (root_) {
      imgs = load_directory_split(*root_ / s.id / split_name(split), n, manifest_.image_size);
    } else {
      imgs.resize(n);
      parallel_for(n, threads_, [&](std::size_t i) { imgs[i] = synth_sample(manifest_, s, split, i); });
    }
    return cache_.emplace(key, std::move(imgs)).first->second;
  }

private:
  Manifest manifest_;
  std::optional<std::filesystem::path> root_;
  std::size_t threads_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::vector<ImageBuffer>> cache_;
};

// Writes <out>/<source>/<split>/NNNNNN.png for every procedural source plus a
// resolved manifest.json. Output is staged in <out>.partial and renamed on
// success, so a failure leaves nothing behind.
inline void materialize_corpus(const Manifest& manifest, const std::filesystem::path& out_dir,
                               std::size_t threads = 1) {
  namespace fs = std::filesystem;
  manifest.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir))
    throw ValidationError("output directory '" + out_dir.string() + "' already exists and is not empty");
  const fs::path staging = out_dir.string() + ".partial";
  fs::remove_all(staging);
  try {
    fs::create_directories(staging);
    const Timeline timeline = build_timeline(manifest);
    Manifest resolved = manifest;
    resolved.sources = timeline.generated;
    std::vector<const GeneratorSource*> all{&resolved.real};
    for (const auto& s : resolved.sources) all.push_back(&s);
    for (const auto* s : all)
      for (Split split : kAllSplits) {
        const std::size_t n = s->counts.of(split);
        if (s->dir) {
          (void)load_directory_split(*s->dir / split_name(split), n, manifest.image_size);
          continue;
        }
        const fs::path dir = staging / s->id / split_name(split);
        fs::create_directories(dir);
        parallel_for(n, threads, [&](std::size_t i) {
          save_png(synth_sample(manifest, *s, split, i), dir / sample_filename(i));
        });
      }
    std::ofstream(staging / "manifest.json") << manifest_to_json(resolved).dump(2) << '\n';
    if (fs::exists(out_dir)) fs::remove(out_dir);
    fs::rename(staging, out_dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
}

}  // namespace oaid
