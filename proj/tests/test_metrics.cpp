#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oaid/matrix.hpp"
#include "oaid/metrics.hpp"
#include "oracles.hpp"

using namespace oaid;
using Catch::Approx;

namespace {

// Random score set with deliberately coarse values so ties are common.
ScoreSet random_set(Rng& rng, std::size_t max_n) {
  ScoreSet s;
  const std::size_t nr = uniform_index(rng, 1, max_n), nf = uniform_index(rng, 1, max_n);
  const double levels = static_cast<double>(uniform_index(rng, 2, 50));
  const double shift = uniform(rng, 0.0, 0.5);
  for (std::size_t i = 0; i < nr; ++i) s.real_scores.push_back(std::floor(uniform(rng, 0.0, 1.0) * levels) / levels);
  for (std::size_t i = 0; i < nf; ++i)
    s.fake_scores.push_back(std::floor(std::min(0.999, uniform(rng, shift, 1.0)) * levels) / levels);
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("oaid_test_metrics_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ScoreSet ss(std::vector<double> real, std::vector<double> fake) {
  ScoreSet s;
  s.real_scores = std::move(real);
  s.fake_scores = std::move(fake);
  return s;
}

}  // namespace

TEST_CASE("auc examples", "[metrics][auc]") {
  CHECK(auc(ss({0.1, 0.2}, {0.8, 0.9})) == 1.0);
  CHECK(auc(ss({0.5, 0.5}, {0.5, 0.5, 0.5})) == 0.5);
  CHECK(auc(ss({0.1, 0.6}, {0.4, 0.9})) == Approx(0.75).margin(1e-12));
  CHECK_THROWS_AS(auc(ss({}, {0.3})), ValidationError);
  CHECK_THROWS_AS(auc(ss({0.3}, {})), ValidationError);
  CHECK_THROWS_AS(auc(ss({NAN}, {0.3})), NumericError);
}

TEST_CASE("auc matches pairwise rank statistic", "[metrics][auc]") {
  Rng rng{11};
  for (int t = 0; t < 1000; ++t) {
    const auto s = random_set(rng, 200);
    REQUIRE(auc(s) == Approx(oracle::pairwise_auc(s.real_scores, s.fake_scores)).margin(1e-9));
  }
}

TEST_CASE("roc curve is monotone and anchored", "[metrics][auc]") {
  Rng rng{12};
  for (int t = 0; t < 50; ++t) {
    const auto c = roc_curve(random_set(rng, 60));
    CHECK(c.front().fpr == 0.0);
    CHECK(c.front().tpr == 0.0);
    CHECK(c.back().fpr == 1.0);
    CHECK(c.back().tpr == 1.0);
    for (std::size_t i = 1; i < c.size(); ++i) {
      CHECK(c[i].fpr >= c[i - 1].fpr);
      CHECK(c[i].tpr >= c[i - 1].tpr);
    }
  }
}

TEST_CASE("auc is invariant under strictly increasing transforms", "[metrics][auc]") {
  Rng rng{13};
  for (int t = 0; t < 100; ++t) {
    auto s = random_set(rng, 80);
    const double before = auc(s);
    for (auto* v : {&s.real_scores, &s.fake_scores})
      for (double& x : *v) x = 1.0 / (1.0 + std::exp(-7.0 * x + 2.0));
    CHECK(auc(s) == Approx(before).margin(1e-12));
  }
}

TEST_CASE("average precision examples", "[metrics][ap]") {
  CHECK(average_precision(ss({0.1, 0.2}, {0.8, 0.9})) == 1.0);
  CHECK(average_precision(ss({0.1, 0.2}, {0.9})) == 1.0);
  CHECK(average_precision(ss({0.3, 0.7}, {0.5, 0.9})) == Approx(5.0 / 6.0).margin(1e-12));
  CHECK_THROWS_AS(average_precision(ss({0.1}, {})), ValidationError);
}

TEST_CASE("average precision matches a swept oracle", "[metrics][ap]") {
  Rng rng{14};
  for (int t = 0; t < 100; ++t) {
    const auto s = random_set(rng, 200);
    REQUIRE(average_precision(s) == Approx(oracle::swept_ap(s.real_scores, s.fake_scores)).margin(1e-9));
  }
}

TEST_CASE("thresholded accuracies", "[metrics][accuracy]") {
  const std::vector<double> high(5, 0.9), low(5, 0.1), mixed{0.4, 0.6, 0.7};
  CHECK(synthetic_accuracy(high) == 1.0);
  CHECK(synthetic_accuracy(low) == 0.0);
  CHECK(synthetic_accuracy(mixed) == Approx(2.0 / 3.0));
  CHECK(real_accuracy(high) == 0.0);
  CHECK(real_accuracy(low) == 1.0);
  CHECK(real_accuracy(mixed) == Approx(1.0 / 3.0));
  // Threshold itself counts as real.
  CHECK(synthetic_accuracy(std::vector<double>{0.5}) == 0.0);
  CHECK(real_accuracy(std::vector<double>{0.5}) == 1.0);
  CHECK_THROWS_AS(synthetic_accuracy(std::vector<double>{}), ValidationError);
}

TEST_CASE("precision recall f1 from confusion counts", "[metrics][prf]") {
  const std::vector<double> scores{0.9, 0.8, 0.1, 0.2};
  auto m = precision_recall_f1(scores, std::vector<int>{1, 0, 1, 0});
  CHECK(m.precision == 0.5);
  CHECK(m.recall == 0.5);
  CHECK(m.f1 == 0.5);
  CHECK(m.accuracy == 0.5);

  m = precision_recall_f1(scores, std::vector<int>{1, 1, 0, 0});
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.f1 == 1.0);

  // No predicted positives: precision undefined, reported as 0 with a flag.
  m = precision_recall_f1(std::vector<double>{0.1, 0.2, 0.3}, std::vector<int>{1, 0, 1});
  CHECK(m.precision_undefined);
  CHECK_FALSE(m.recall_undefined);
  CHECK(m.precision == 0.0);
  CHECK(m.recall == 0.0);
  CHECK(m.f1 == 0.0);
  CHECK(m.accuracy == Approx(1.0 / 3.0));

  CHECK_THROWS_AS(precision_recall_f1(scores, std::vector<int>{1}), ValidationError);
}

TEST_CASE("matrix cell fields", "[metrics][matrix]") {
  Rng rng{15};
  for (int t = 0; t < 50; ++t) {
    const auto s = random_set(rng, 40);
    const std::size_t order = uniform_index(rng, 1, 4), stage = uniform_index(rng, 1, 4);
    const auto c = evaluate_cell(s.real_scores, s.fake_scores, "x", order, stage);
    CHECK(c.balanced_accuracy == (c.synthetic_accuracy + c.real_accuracy) / 2.0);
    CHECK(c.auc == auc(s));
    CHECK(c.region == (order == stage ? Region::diagonal : order < stage ? Region::seen : Region::unseen));
  }
}

namespace {

MetricsMatrix toy_matrix(std::size_t n) {
  MetricsMatrix m;
  Rng rng{16};
  m.cells.resize(n);
  for (std::size_t r = 0; r < n; ++r) m.sources.push_back("src" + std::to_string(r + 1));
  for (std::size_t k = 1; k <= n; ++k) {
    m.stage_sources.push_back(m.sources[k - 1]);
    const auto s = random_set(rng, 30);
    m.real_accuracy.push_back(real_accuracy(s.real_scores));
    for (std::size_t r = 0; r < n; ++r) {
      const auto f = random_set(rng, 30);
      m.cells[r].push_back(evaluate_cell(s.real_scores, f.fake_scores, m.sources[r], r + 1, k));
    }
  }
  return m;
}

}  // namespace

TEST_CASE("reports: csv shape and round trip", "[metrics][reports]") {
  const auto m = toy_matrix(3);
  const auto dir = temp_dir("csv");
  emit_reports(m, dir);
  for (const auto& name : report_metrics()) {
    std::ifstream in(dir / (name + ".csv"));
    REQUIRE(in);
    std::string line;
    std::getline(in, line);
    CHECK(line == "test_source,stage_1,stage_2,stage_3");
    std::size_t rows = 0, cells = 0;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string field;
      std::getline(ss, field, ',');
      std::size_t k = 0;
      while (std::getline(ss, field, ',')) {
        const double v = std::stod(field);
        const double expect = rows < 3 ? cell_metric(m.cells[rows][k], name) : m.real_accuracy[k];
        CHECK(v == Approx(expect).margin(5e-7));
        CHECK(field.size() - field.find('.') - 1 == 6);
        ++k;
        ++cells;
      }
      CHECK(k == 3);
      ++rows;
    }
    CHECK(rows == (name == "accuracy" ? 4u : 3u));
    CHECK(cells == rows * 3);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("reports: long-format json", "[metrics][reports]") {
  const auto m = toy_matrix(3);
  const auto j = matrix_to_json(m);
  REQUIRE(j.size() == 9 + 3);
  std::size_t diag = 0, seen = 0, unseen = 0;
  for (const auto& row : j) {
    const auto region = row.at("region").get<std::string>();
    if (region == "real") continue;
    const auto& c = m.at(row.at("test_source"), row.at("stage"));
    CHECK(row.at("metrics").at("auc").get<double>() == c.auc);
    diag += region == "diagonal";
    seen += region == "seen";
    unseen += region == "unseen";
  }
  CHECK(diag == 3);
  CHECK(seen == 3);
  CHECK(unseen == 3);
}

TEST_CASE("reports: heatmap colours", "[metrics][reports]") {
  MetricsMatrix m;
  m.sources = {"a"};
  m.stage_sources = {"a", "b"};
  m.real_accuracy = {1.0, 1.0};
  MatrixCell one, zero;
  one.auc = 1.0;
  zero.auc = 0.0;
  m.cells = {{one, zero}};
  const auto dir = temp_dir("ppm");
  emit_reports(m, dir);
  const std::string ppm = slurp(dir / "auc.ppm");
  const std::string header = "P6\n32 16\n255\n";
  REQUIRE(ppm.size() == header.size() + 32 * 16 * 3);
  CHECK(ppm.substr(0, header.size()) == header);
  auto px = [&](std::size_t x) {
    const auto* p = reinterpret_cast<const unsigned char*>(ppm.data() + header.size() + x * 3);
    return std::array<unsigned char, 3>{p[0], p[1], p[2]};
  };
  CHECK(px(0) == viridis(1.0));
  CHECK(px(0) == std::array<unsigned char, 3>{253, 231, 37});
  CHECK(px(31) == std::array<unsigned char, 3>{68, 1, 84});
  std::filesystem::remove_all(dir);
}

TEST_CASE("build_matrix structure on untrained checkpoints", "[metrics][matrix]") {
  Manifest man = default_manifest(5);
  man.sources.resize(3);
  for (auto* s : {&man.real, &man.sources[0], &man.sources[1], &man.sources[2]}) s->counts = {4, 2, 6};
  const Corpus corpus(man);
  const Timeline t = build_timeline(man);
  std::vector<StageCheckpoint> ckpts;
  for (std::size_t k = 1; k <= 3; ++k) {
    auto model = build_whole_image_net(64, k);
    model.stage = k;
    ckpts.push_back({k, t.at_stage(k).id, {}, model});
  }
  const auto m = build_matrix(ckpts, t, corpus);
  REQUIRE(m.sources.size() == 3);
  REQUIRE(m.real_accuracy.size() == 3);
  for (std::size_t r = 0; r < 3; ++r) {
    REQUIRE(m.cells[r].size() == 3);
    for (std::size_t k = 1; k <= 3; ++k) {
      const auto& c = m.cells[r][k - 1];
      CHECK(c.stage == k);
      CHECK(c.test_source == t.generated[r].id);
      CHECK(c.region == region_of(r + 1, k));
    }
  }
  const auto again = build_matrix(ckpts, t, corpus);
  CHECK(matrix_to_json(again).dump() == matrix_to_json(m).dump());

  ckpts.erase(ckpts.begin());
  CHECK_THROWS_AS(build_matrix(ckpts, t, corpus), ValidationError);
}
