#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "oaid/augment.hpp"
#include "oaid/corpus.hpp"
#include "oaid/detector.hpp"
#include "oaid/error.hpp"
#include "oaid/log.hpp"
#include "oaid/metrics.hpp"
#include "oaid/online_train.hpp"

namespace oaid {

enum class Region { diagonal, seen, unseen };

inline std::string region_name(Region r) {
  switch (r) {
    case Region::diagonal: return "diagonal";
    case Region::seen: return "seen";
    case Region::unseen: return "unseen";
  }
  return "?";
}

// Source released at stage `order`, evaluated with the checkpoint of stage k.
inline Region region_of(std::size_t order, std::size_t k) {
  return order == k ? Region::diagonal : (order < k ? Region::seen : Region::unseen);
}

struct MatrixCell {
  std::string test_source;
  std::size_t stage = 0;
  Region region = Region::diagonal;
  double synthetic_accuracy = 0.0;
  double real_accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double auc = 0.0;
  double ap = 0.0;
  ClassificationMetrics prf;  // real test set plus this source's test set
};

struct MetricsMatrix {
  std::vector<std::string> sources;  // rows, release order
  std::vector<std::string> stage_sources;  // column k-1 = source added at stage k
  std::vector<std::vector<MatrixCell>> cells;  // [row][stage-1]
  std::vector<double> real_accuracy;           // per stage

  const MatrixCell& at(const std::string& source, std::size_t stage) const {
    for (std::size_t r = 0; r < sources.size(); ++r)
      if (sources[r] == source) {
        if (stage < 1 || stage > cells[r].size()) throw ValidationError("no stage " + std::to_string(stage));
        return cells[r][stage - 1];
      }
    throw ValidationError("no test source '" + source + "' in matrix");
  }
};

inline MatrixCell evaluate_cell(const std::vector<double>& real_scores, const std::vector<double>& fake_scores,
                                const std::string& source, std::size_t order, std::size_t stage) {
  MatrixCell c;
  c.test_source = source;
  c.stage = stage;
  c.region = region_of(order, stage);
  const ScoreSet ss{real_scores, fake_scores, source, stage};
  c.synthetic_accuracy = synthetic_accuracy(fake_scores);
  c.real_accuracy = real_accuracy(real_scores);
  c.balanced_accuracy = 0.5 * (c.synthetic_accuracy + c.real_accuracy);
  c.auc = auc(ss);
  c.ap = average_precision(ss);
  std::vector<double> scores = real_scores;
  scores.insert(scores.end(), fake_scores.begin(), fake_scores.end());
  std::vector<int> labels(real_scores.size(), 0);
  labels.resize(scores.size(), 1);
  c.prf = precision_recall_f1(scores, labels);
  return c;
}

// Scores every checkpoint on the real test split and every generated test
// split (eval transform only), then fills one cell per (source, stage).
inline MetricsMatrix build_matrix(const std::vector<StageCheckpoint>& checkpoints, const Timeline& timeline,
                                  const Corpus& corpus, const AugmentConfig& eval = AugmentConfig::desk(),
                                  const EventLog& log = {}) {
  if (checkpoints.empty()) throw ValidationError("matrix needs at least one checkpoint");
  for (std::size_t i = 0; i < checkpoints.size(); ++i)
    if (checkpoints[i].stage != i + 1)
      throw ValidationError("checkpoints must cover stages 1.." + std::to_string(checkpoints.size()) + " in order");
  auto prepared = [&](const std::string& id) {
    std::vector<ImageBuffer> out;
    for (const auto& img : corpus.images(id, Split::test)) out.push_back(apply_eval_transform(img, eval));
    return out;
  };
  const auto real_imgs = prepared(timeline.real.id);
  std::vector<std::vector<ImageBuffer>> fake_imgs;
  MetricsMatrix m;
  for (const auto& s : timeline.generated) {
    m.sources.push_back(s.id);
    fake_imgs.push_back(prepared(s.id));
  }
  m.cells.resize(m.sources.size());
  for (const auto& ckpt : checkpoints) {
    m.stage_sources.push_back(ckpt.source_id);
    const auto real_scores = predict_scores(ckpt.model, real_imgs);
    m.real_accuracy.push_back(real_accuracy(real_scores));
    for (std::size_t r = 0; r < m.sources.size(); ++r) {
      const auto fake_scores = predict_scores(ckpt.model, fake_imgs[r]);
      m.cells[r].push_back(
          evaluate_cell(real_scores, fake_scores, m.sources[r], timeline.generated[r].order, ckpt.stage));
    }
    log.emit("matrix_column", {{"stage", ckpt.stage}, {"real_accuracy", m.real_accuracy.back()}});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Reports

inline const std::vector<std::string>& report_metrics() {
  static const std::vector<std::string> names{"accuracy", "real_accuracy", "balanced_accuracy", "auc",
                                              "ap",       "precision",     "recall",            "f1"};
  return names;
}

inline double cell_metric(const MatrixCell& c, const std::string& name) {
  if (name == "accuracy") return c.synthetic_accuracy;
  if (name == "real_accuracy") return c.real_accuracy;
  if (name == "balanced_accuracy") return c.balanced_accuracy;
  if (name == "auc") return c.auc;
  if (name == "ap") return c.ap;
  if (name == "precision") return c.prf.precision;
  if (name == "recall") return c.prf.recall;
  if (name == "f1") return c.prf.f1;
  throw ValidationError("unknown metric '" + name + "'");
}

// Viridis, 9 anchors, linear in between.
inline std::array<unsigned char, 3> viridis(double t) {
  static constexpr double k[9][3] = {{68, 1, 84},    {71, 44, 122},  {59, 81, 139},  {44, 113, 142}, {33, 144, 141},
                                     {39, 173, 129}, {92, 200, 99},  {170, 220, 50}, {253, 231, 37}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * 8.0;
  const auto i = std::min<std::size_t>(7, static_cast<std::size_t>(t));
  const double f = t - static_cast<double>(i);
  std::array<unsigned char, 3> out{};
  for (int c = 0; c < 3; ++c) out[c] = static_cast<unsigned char>(std::lround(k[i][c] + f * (k[i + 1][c] - k[i][c])));
  return out;
}

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline nlohmann::json matrix_to_json(const MetricsMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : m.cells)
    for (const auto& c : row) {
      nlohmann::json metrics;
      for (const auto& name : report_metrics()) metrics[name] = cell_metric(c, name);
      rows.push_back({{"test_source", c.test_source},
                      {"stage", c.stage},
                      {"stage_source", m.stage_sources[c.stage - 1]},
                      {"region", region_name(c.region)},
                      {"metrics", metrics}});
    }
  for (std::size_t k = 0; k < m.real_accuracy.size(); ++k)
    rows.push_back({{"test_source", "real"},
                    {"stage", k + 1},
                    {"stage_source", m.stage_sources[k]},
                    {"region", "real"},
                    {"metrics", {{"real_accuracy", m.real_accuracy[k]}}}});
  return rows;
}

// One CSV and one PPM heatmap per metric, plus metrics.json in long format.
// accuracy.csv carries an extra "real" row with per-stage real accuracy.
inline void emit_reports(const MetricsMatrix& m, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t stages = m.real_accuracy.size();
  for (const auto& name : report_metrics()) {
    std::string csv = "test_source";
    for (std::size_t k = 1; k <= stages; ++k) csv += ",stage_" + std::to_string(k);
    csv += "\n";
    for (std::size_t r = 0; r < m.sources.size(); ++r) {
      csv += m.sources[r];
      for (const auto& c : m.cells[r]) csv += "," + format_metric(cell_metric(c, name));
      csv += "\n";
    }
    if (name == "accuracy") {
      csv += "real";
      for (double v : m.real_accuracy) csv += "," + format_metric(v);
      csv += "\n";
    }
    detail::write_atomic(dir / (name + ".csv"), csv);

    constexpr std::size_t kCell = 16;
    const std::size_t w = stages * kCell, h = m.sources.size() * kCell;
    std::string ppm = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const auto rgb = viridis(cell_metric(m.cells[y / kCell][x / kCell], name));
        ppm.append(reinterpret_cast<const char*>(rgb.data()), 3);
      }
    detail::write_atomic(dir / (name + ".ppm"), ppm);
  }
  detail::write_atomic(dir / "metrics.json", matrix_to_json(m).dump(2) + "\n");
}

}  // namespace oaid
