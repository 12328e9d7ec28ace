#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "oaid/corpus.hpp"
#include "oaid/detector.hpp"
#include "oaid/optimizer.hpp"
#include "support/gradcheck.hpp"
#include "support/temp_dir.hpp"

using namespace oaid;
using Catch::Approx;
using oaid::testing::GradCheckOptions;
using oaid::testing::TempDir;

namespace {

std::size_t count_params(const DetectorModel& m) {
  std::size_t n = 0;
  for (const auto& p : m.params) n += p.size();
  return n;
}

ImageBuffer random_image(std::size_t size, std::uint64_t seed) {
  Rng rng{seed};
  std::vector<float> px(size * size * 3);
  for (auto& v : px) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return ImageBuffer(size, size, 3, std::move(px));
}

ParamSet<double> to_double(const ParamSet<float>& p) {
  ParamSet<double> out;
  for (const auto& t : p) {
    BasicTensor<double> d(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = t[i];
    out.push_back(std::move(d));
  }
  return out;
}

// Scalar transcription of the two-class weighted Dice formula.
double dice_oracle(const std::vector<double>& p, const std::vector<double>& g, double eps = 1e-6) {
  double gf = 0, gb = 0;
  for (double v : g) gf += v, gb += 1 - v;
  const double wf = 1 / ((gf + eps) * (gf + eps)), wb = 1 / ((gb + eps) * (gb + eps));
  double num = 0, den = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += wf * p[i] * g[i] + wb * (1 - p[i]) * (1 - g[i]);
    den += wf * (p[i] + g[i]) + wb * ((1 - p[i]) + (1 - g[i]));
  }
  return 1 - 2 * (num + eps) / (den + eps);
}

Tensor tensor_of(const Shape& s, const std::vector<double>& v) {
  Tensor t(s);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

}  // namespace

TEST_CASE("whole-image net: parameter count and output shape", "[detector][build]") {
  const auto m = build_whole_image_net(64);
  // conv kxk c->o has o*c*k*k + o parameters.
  const std::size_t expect = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (64 * 64 * 9 + 64) +
                             (2 * 64 + 2);
  CHECK(count_params(m) == expect);
  CHECK(m.head == HeadKind::whole_image);
  for (std::size_t size : {32u, 40u, 64u, 96u}) {
    const auto net = build_whole_image_net(size);
    std::vector<ImageBuffer> imgs{random_image(size, 1), random_image(size, 2), random_image(size, 3)};
    const auto out = infer<float>(net.layers, net.params, images_to_tensor(imgs));
    CHECK(out.shape() == Shape{3, 2});
  }
  CHECK_THROWS_AS(build_whole_image_net(16), ValidationError);
}

TEST_CASE("whole-image net: fresh model gives near-ln2 loss", "[detector][build]") {
  std::vector<ImageBuffer> imgs;
  std::vector<int> labels;
  FingerprintSpec fp;
  fp.upsample_artifact = UpsampleArtifact{2, 0.6};
  for (int i = 0; i < 16; ++i) {
    Rng rng{100u + static_cast<unsigned>(i)};
    imgs.push_back(i % 2 ? synth_generated_image(rng, 64, fp) : synth_real_image(rng, 64));
    labels.push_back(i % 2);
  }
  const Tensor x = images_to_tensor(imgs);
  // Averaged over initialisations: any single draw has logits of order 0.5.
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto m = build_whole_image_net(64, seed);
    mean += cross_entropy_loss<float>(infer<float>(m.layers, m.params, x), labels).value / 8.0;
  }
  CHECK(mean == Approx(std::log(2.0)).margin(0.1));
}

TEST_CASE("cross entropy values", "[detector][loss]") {
  const std::vector<int> one{1}, zero{0};
  CHECK(cross_entropy_loss<double>(BasicTensor<double>({1, 2}, {0.0, 0.0}), one).value ==
        Approx(std::log(2.0)).margin(1e-12));
  CHECK(cross_entropy_loss<double>(BasicTensor<double>({1, 2}, {1.0, 0.0}), one).value ==
        Approx(std::log(1.0 + std::exp(1.0))).margin(1e-12));
  CHECK(cross_entropy_loss<double>(BasicTensor<double>({1, 2}, {-30.0, 30.0}), one).value < 1e-12);
  CHECK(cross_entropy_loss<double>(BasicTensor<double>({1, 2}, {30.0, -30.0}), zero).value < 1e-12);
  CHECK_THROWS_AS(cross_entropy_loss<double>(BasicTensor<double>({1, 2}, {0.0, 0.0}), std::vector<int>{2}),
                  ValidationError);
  CHECK_THROWS_AS(cross_entropy_loss<double>(BasicTensor<double>({2, 2}), one), ShapeError);
}

TEST_CASE("scores from logits", "[detector][predict]") {
  CHECK(score_from_logits(0.0, 0.0) == 0.5);
  CHECK(score_from_logits(-10.0, 10.0) == Approx(1.0).margin(1e-8));
  for (double c : {-5.0, 0.3, 12.0})
    CHECK(score_from_logits(0.2 + c, 1.1 + c) == Approx(score_from_logits(0.2, 1.1)).margin(1e-12));

  const auto pixel = build_pixel_net(64);
  CHECK_THROWS_AS(predict_score(pixel, random_image(64, 1)), ValidationError);
  const auto whole = build_whole_image_net(64);
  const std::vector<ImageBuffer> one{random_image(64, 1)};
  CHECK_THROWS_AS(predict_masks(whole, one), ValidationError);

  const double s = predict_score(whole, one[0]);
  CHECK((s >= 0.0 && s <= 1.0));
  CHECK(predict_score(whole, one[0]) == s);
}

TEST_CASE("pixel net: shapes and constant-input flatness", "[detector][build]") {
  for (std::size_t size : {8u, 32u, 64u}) {
    const auto m = build_pixel_net(size, 5);
    std::vector<ImageBuffer> imgs{random_image(size, 9), random_image(size, 10)};
    const auto maps = predict_masks(m, imgs);
    REQUIRE(maps.size() == 2);
    CHECK(maps[0].height == size);
    CHECK(maps[0].width == size);
  }
  CHECK_THROWS_AS(build_pixel_net(60), ValidationError);
  CHECK_THROWS_AS(build_pixel_net(0), ValidationError);

  const auto m = build_pixel_net(64, 6);
  for (double level : {0.1, 0.5, 0.9}) {
    ImageBuffer flat(64, 64, 3);
    for (std::size_t i = 0; i < flat.size(); ++i) flat.set_index(i, level);
    const auto map = predict_masks(m, std::vector<ImageBuffer>{flat})[0];
    double mean = 0, var = 0;
    for (double v : map.values) mean += v / double(map.values.size());
    for (double v : map.values) var += (v - mean) * (v - mean) / double(map.values.size());
    CHECK(std::sqrt(var) <= 1e-3);
  }
}

TEST_CASE("gradient check: whole-image net with cross entropy", "[detector][gradcheck]") {
  const auto m = build_whole_image_net(32, 11);
  const auto params = to_double(m.params);
  const auto input = oaid::testing::random_tensor({2, 3, 32, 32}, 12, -1.0, 1.0);
  const std::vector<int> labels{1, 0};
  auto trace = forward<double>(m.layers, params, input);
  const auto loss = cross_entropy_loss<double>(trace.output(), labels);
  const auto grads = backward(trace, params, loss.grad);
  const auto r = oaid::testing::gradcheck(
      m.layers, params, input, [&](const BasicTensor<double>& out) { return cross_entropy_loss<double>(out, labels).value; },
      grads, GradCheckOptions{.step = 1e-4, .max_coords_per_tensor = 25, .seed = 13});
  CHECK(r.checked >= 100);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("gradient check: pixel net with weighted Dice", "[detector][gradcheck]") {
  const auto m = build_pixel_net(16, 21);
  auto params = to_double(m.params);
  const auto input = oaid::testing::random_tensor({2, 3, 16, 16}, 22, -1.0, 1.0);
  BasicTensor<double> target({2, 1, 16, 16});
  Rng rng{23};
  for (auto& v : target.data()) v = coin(rng, 0.3) ? 1.0 : 0.0;
  auto trace = forward<double>(m.layers, params, input);
  const auto loss = weighted_dice_loss<double>(trace.output(), target);
  const auto grads = backward(trace, params, loss.grad);
  const auto r = oaid::testing::gradcheck(
      m.layers, params, input, [&](const BasicTensor<double>& out) { return weighted_dice_loss<double>(out, target).value; },
      grads, GradCheckOptions{.step = 1e-4, .max_coords_per_tensor = 25, .seed = 24});
  CHECK(r.checked >= 100);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("weighted Dice identities", "[detector][dice]") {
  Rng rng{31};
  for (int t = 0; t < 20; ++t) {
    std::vector<double> g(64);
    for (auto& v : g) v = coin(rng, 0.3) ? 1.0 : 0.0;
    g[0] = 1.0;
    g[1] = 0.0;
    std::vector<double> inv(64);
    for (std::size_t i = 0; i < 64; ++i) inv[i] = 1.0 - g[i];
    CHECK(weighted_dice_loss<float>(tensor_of({1, 1, 8, 8}, g), tensor_of({1, 1, 8, 8}, g)).value <= 1e-5);
    CHECK(weighted_dice_loss<float>(tensor_of({1, 1, 8, 8}, inv), tensor_of({1, 1, 8, 8}, g)).value >= 0.999);
  }

  // Uniform 0.5 prediction against a half-ones target, against the scalar oracle.
  std::vector<double> half(64, 0.5), target(64, 0.0);
  for (std::size_t i = 0; i < 32; ++i) target[i] = 1.0;
  CHECK(weighted_dice_loss<double>(BasicTensor<double>({1, 1, 8, 8}, half), BasicTensor<double>({1, 1, 8, 8}, target))
            .value == Approx(dice_oracle(half, target)).margin(1e-12));
  CHECK(dice_oracle(half, target) == Approx(0.5).margin(1e-4));

  // Range and oracle agreement on random pairs.
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> p(36), g(36);
    for (auto& v : p) v = uniform(rng, 0.0, 1.0);
    for (auto& v : g) v = coin(rng, uniform(rng, 0.0, 1.0)) ? 1.0 : 0.0;
    const double l = weighted_dice_loss<double>(BasicTensor<double>({1, 1, 6, 6}, p), BasicTensor<double>({1, 1, 6, 6}, g)).value;
    REQUIRE((l >= 0.0 && l <= 1.0));
    REQUIRE(l == Approx(std::clamp(dice_oracle(p, g), 0.0, 1.0)).margin(1e-9));
  }

  CHECK_THROWS_AS(weighted_dice_loss<double>(BasicTensor<double>({1, 4}, {0.1, 0.2, 0.3, 0.4}),
                                             BasicTensor<double>({1, 4}, {0.0, 0.5, 1.0, 0.0})),
                  ValidationError);
  CHECK_THROWS_AS(weighted_dice_loss<double>(BasicTensor<double>({1, 4}), BasicTensor<double>({1, 3})), ShapeError);
}

TEST_CASE("weighted Dice decreases as mass moves onto the foreground", "[detector][dice]") {
  std::vector<double> g(50, 0.0);
  for (std::size_t i = 0; i < 10; ++i) g[i] = 1.0;
  double prev = 2.0;
  for (int step = 0; step <= 10; ++step) {
    const double a = step / 10.0;
    std::vector<double> p(50);
    for (std::size_t i = 0; i < 50; ++i) p[i] = g[i] ? a : (1.0 - a) * 0.25;
    const double l = weighted_dice_loss<double>(BasicTensor<double>({1, 50}, p), BasicTensor<double>({1, 50}, g)).value;
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("pixel metrics", "[detector][metrics]") {
  const std::vector<double> t{1, 0, 1, 0};
  auto m = pixel_metrics(t, t);
  CHECK(m.accuracy == 1.0);
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.f1 == 1.0);

  m = pixel_metrics(std::vector<double>{0, 0, 0, 0}, t);
  CHECK(m.accuracy == 0.5);
  CHECK(m.recall == 0.0);
  CHECK(m.f1 == 0.0);
  CHECK(m.precision_undefined);

  m = pixel_metrics(std::vector<double>{0.9, 0.8, 0.1, 0.2}, t);
  CHECK(m.precision == 0.5);
  CHECK(m.recall == 0.5);
  CHECK(m.f1 == 0.5);
  CHECK(m.accuracy == 0.5);
  CHECK_THROWS_AS(pixel_metrics(std::vector<double>{0.1}, t), ShapeError);
}

TEST_CASE("checkpoint round trip is bit-exact", "[detector][checkpoint]") {
  TempDir dir;
  auto m = build_whole_image_net(64, 41);
  m.stage = 3;
  m.metadata["note"] = "x";
  const auto path = dir.path() / "m.ckpt";
  save_model(m, path);
  const auto back = load_model(path);
  CHECK(back.stage == 3);
  CHECK(back.head == m.head);
  CHECK(back.input_size == 64);
  CHECK(back.input_filter == m.input_filter);
  CHECK(back.metadata == m.metadata);
  REQUIRE(back.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    CHECK(std::memcmp(back.params[i].raw(), m.params[i].raw(), m.params[i].size() * sizeof(float)) == 0);
  CHECK(serialize_model(back) == serialize_model(m));
  std::vector<ImageBuffer> imgs{random_image(64, 1), random_image(64, 2)};
  const auto a = predict_scores(m, imgs), b = predict_scores(back, imgs);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);

  const auto pix = build_pixel_net(32, 42);
  const auto pix_back = deserialize_model(serialize_model(pix));
  CHECK(pix_back.head == HeadKind::pixel);
  CHECK(serialize_model(pix_back) == serialize_model(pix));
}

TEST_CASE("corrupt checkpoints are rejected", "[detector][checkpoint]") {
  TempDir dir;
  const std::string good = serialize_model(build_whole_image_net(32, 1));

  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bad), IoError);

  bad = good;
  bad[4] = 9;  // version
  CHECK_THROWS_AS(deserialize_model(bad), IoError);

  for (std::size_t cut : {std::size_t{2}, std::size_t{8}, good.size() / 2, good.size() - 1}) {
    const auto path = dir.path() / "trunc.ckpt";
    std::ofstream(path, std::ios::binary) << good.substr(0, cut);
    try {
      (void)load_model(path);
      FAIL("truncated checkpoint accepted");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("trunc.ckpt") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(deserialize_model(good + "x"), IoError);
  CHECK_THROWS_AS(load_model(dir.path() / "missing.ckpt"), IoError);
}

TEST_CASE("whole-image net learns a separable toy set in one epoch", "[detector][train]") {
  // Class 1 images carry a strong checkerboard, class 0 are smooth ramps.
  std::vector<ImageBuffer> imgs;
  std::vector<int> labels;
  Rng rng{51};
  for (int i = 0; i < 256; ++i) {
    const int label = i % 2;
    ImageBuffer img(32, 32, 3);
    const double base = uniform(rng, 0.3, 0.7), slope = uniform(rng, -0.01, 0.01);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          img.set(y, x, c, base + slope * double(x) + (label ? 0.1 * (((x + y) % 2) ? 1 : -1) : 0.0));
    imgs.push_back(img);
    labels.push_back(label);
  }
  auto m = build_whole_image_net(32, 52);
  OptimizerState<float> opt{{1e-3, 0.9, 0.999, 1e-8}, {}, {}, 0};
  for (std::size_t s = 0; s < imgs.size(); s += 16) {
    const std::span<const ImageBuffer> batch(imgs.data() + s, 16);
    auto trace = forward<float>(m.layers, m.params, images_to_tensor(batch, m.input_filter));
    const auto loss = cross_entropy_loss<float>(trace.output(), std::span<const int>(labels.data() + s, 16));
    optimizer_step(opt, m.params, backward(trace, m.params, loss.grad, false).params);
  }
  const auto scores = predict_scores(m, imgs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] > 0.5) == (labels[i] == 1);
  CHECK(double(correct) / double(scores.size()) >= 0.95);
}
