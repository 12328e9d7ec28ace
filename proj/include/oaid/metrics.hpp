#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oaid/error.hpp"

namespace oaid {

struct ScoreSet {
  std::vector<double> real_scores;
  std::vector<double> fake_scores;
  std::string source_id;
  std::size_t stage = 0;

  void validate(const char* what) const {
    if (real_scores.empty() || fake_scores.empty())
      throw ValidationError(std::string(what) + " needs nonempty real and fake scores");
    for (const auto* v : {&real_scores, &fake_scores})
      for (double s : *v)
        if (!std::isfinite(s)) throw NumericError(std::string(what) + " got a non-finite score");
  }
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

namespace detail {

// (score, is_fake) sorted by descending score.
inline std::vector<std::pair<double, bool>> ranked(const ScoreSet& s) {
  std::vector<std::pair<double, bool>> v;
  v.reserve(s.real_scores.size() + s.fake_scores.size());
  for (double x : s.real_scores) v.emplace_back(x, false);
  for (double x : s.fake_scores) v.emplace_back(x, true);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  return v;
}

}  // namespace detail

// Threshold sweep from +inf down; equal scores form one step, so a tie block
// becomes a single diagonal segment.
inline std::vector<RocPoint> roc_curve(const ScoreSet& s) {
  s.validate("roc_curve");
  const auto v = detail::ranked(s);
  const double np = static_cast<double>(s.fake_scores.size()), nn = static_cast<double>(s.real_scores.size());
  std::vector<RocPoint> curve{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < v.size();) {
    const double score = v[i].first;
    for (; i < v.size() && v[i].first == score; ++i) (v[i].second ? tp : fp)++;
    curve.push_back({static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return curve;
}

// Trapezoidal area under roc_curve; equals P(fake > real) + P(tie) / 2.
inline double auc(const ScoreSet& s) {
  const auto c = roc_curve(s);
  double area = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i) area += (c[i].fpr - c[i - 1].fpr) * (c[i].tpr + c[i - 1].tpr) / 2.0;
  return area;
}

// Sum over positives-ranked-so-far of (recall step) * precision, sweeping
// thresholds in descending order with tie blocks evaluated together.
inline double average_precision(const ScoreSet& s) {
  s.validate("average_precision");
  const auto v = detail::ranked(s);
  const double np = static_cast<double>(s.fake_scores.size());
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < v.size();) {
    const double score = v[i].first;
    for (; i < v.size() && v[i].first == score; ++i, ++seen)
      if (v[i].second) ++tp;
    const double recall = static_cast<double>(tp) / np;
    ap += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(seen);
    prev_recall = recall;
  }
  return ap;
}

// Fraction of fake scores above the threshold.
inline double synthetic_accuracy(std::span<const double> fake_scores, double threshold = 0.5) {
  if (fake_scores.empty()) throw ValidationError("synthetic_accuracy needs at least one score");
  return static_cast<double>(std::count_if(fake_scores.begin(), fake_scores.end(),
                                           [&](double v) { return v > threshold; })) /
         static_cast<double>(fake_scores.size());
}

// Fraction of real scores at or below the threshold.
inline double real_accuracy(std::span<const double> real_scores, double threshold = 0.5) {
  if (real_scores.empty()) throw ValidationError("real_accuracy needs at least one score");
  return static_cast<double>(std::count_if(real_scores.begin(), real_scores.end(),
                                           [&](double v) { return v <= threshold; })) /
         static_cast<double>(real_scores.size());
}

struct ClassificationMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_undefined = false;  // no predicted positives
  bool recall_undefined = false;     // no actual positives
};

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  void add(bool predicted, bool actual) {
    if (predicted) (actual ? tp : fp)++;
    else (actual ? fn : tn)++;
  }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }

  ClassificationMetrics metrics() const {
    ClassificationMetrics m;
    const std::size_t total = tp + fp + tn + fn;
    m.accuracy = total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
    m.precision_undefined = tp + fp == 0;
    m.recall_undefined = tp + fn == 0;
    m.precision = m.precision_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    m.recall = m.recall_undefined ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
  }
};

// Positive class = synthetic (label 1); prediction is score > threshold.
inline ClassificationMetrics precision_recall_f1(std::span<const double> scores, std::span<const int> labels,
                                                 double threshold = 0.5) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) c.add(scores[i] > threshold, labels[i] == 1);
  return c.metrics();
}

}  // namespace oaid
