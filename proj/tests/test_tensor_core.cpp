#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "oaid/layers.hpp"
#include "oaid/optimizer.hpp"
#include "support/gradcheck.hpp"

using namespace oaid;
using oaid::testing::GradCheckOptions;
using oaid::testing::gradcheck;
using oaid::testing::projection_loss;
using oaid::testing::random_tensor;

namespace {

// Direct (loop) convolution used as an independent reference.
std::vector<double> direct_conv(const std::vector<double>& x, std::size_t c, std::size_t h, std::size_t w,
                                const std::vector<double>& k, std::size_t o, std::size_t ks, std::size_t pad) {
  const std::size_t ho = h + 2 * pad - ks + 1, wo = w + 2 * pad - ks + 1;
  std::vector<double> y(o * ho * wo, 0.0);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t ic = 0; ic < c; ++ic)
          for (std::size_t a = 0; a < ks; ++a)
            for (std::size_t b = 0; b < ks; ++b) {
              const long yy = static_cast<long>(i + a) - static_cast<long>(pad);
              const long xx = static_cast<long>(j + b) - static_cast<long>(pad);
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              y[(oc * ho + i) * wo + j] += x[(ic * h + yy) * w + xx] * k[((oc * c + ic) * ks + a) * ks + b];
            }
  return y;
}

template <typename T>
Gradients<T> grads_for(const std::vector<LayerSpec>& layers, const ParamSet<T>& params, const BasicTensor<T>& x,
                       const BasicTensor<T>& out_grad) {
  auto trace = forward<T>(layers, params, x);
  return backward(trace, params, out_grad);
}

// Gradient check of a layer stack under the fixed random projection loss.
oaid::testing::GradCheckResult check_stack(const std::vector<LayerSpec>& layers, const Shape& input_shape,
                                           std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  auto params = init_params<double>(layers, seed);
  // Non-zero biases so bias gradients are exercised away from the origin.
  for (std::size_t i = 1; i < params.size(); i += 2)
    params[i] = random_tensor(params[i].shape(), seed + 100 + i, -0.1, 0.1);
  auto input = random_tensor(input_shape, seed + 7, lo, hi);
  const auto out_shape = infer<double>(layers, params, input).shape();
  Rng rng{seed + 3};
  std::vector<double> r(shape_volume(out_shape));
  for (auto& v : r) v = uniform(rng, -1.0, 1.0);
  const auto loss = projection_loss(out_shape, seed + 3);
  const auto grads = grads_for<double>(layers, params, input, BasicTensor<double>(out_shape, r));
  return gradcheck(layers, params, input, loss, grads, GradCheckOptions{.seed = seed});
}

}  // namespace

TEST_CASE("relu clamps negatives", "[tensor][forward]") {
  const std::vector<LayerSpec> layers{LayerSpec::of(LayerKind::relu)};
  const Tensor x({1, 3}, {-1.0f, 0.0f, 2.0f});
  const auto y = infer<float>(layers, {}, x);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);
}

TEST_CASE("1x1 identity convolution reproduces its input", "[tensor][forward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(3, 3, 1, 0)};
  ParamSet<float> params{Tensor({3, 3, 1, 1}), Tensor({3}, 0.0f)};
  for (std::size_t c = 0; c < 3; ++c) params[0][c * 3 + c] = 1.0f;
  const auto x = random_tensor({2, 3, 5, 4}, 11).cast<float>();
  CHECK(infer<float>(layers, params, x) == x);
}

TEST_CASE("3x3 all-ones kernel on a 3x3 ones image", "[tensor][forward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(1, 1, 3, 1)};
  const ParamSet<double> params{BasicTensor<double>({1, 1, 3, 3}, 1.0), BasicTensor<double>({1}, 0.0)};
  const BasicTensor<double> x({1, 1, 3, 3}, 1.0);
  const auto y = infer<double>(layers, params, x);
  const auto ref = direct_conv(std::vector<double>(9, 1.0), 1, 3, 3, std::vector<double>(9, 1.0), 1, 3, 1);
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(y[i] == expected[i]);
    CHECK(ref[i] == expected[i]);
  }
}

TEST_CASE("im2col convolution agrees with direct convolution", "[tensor][forward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(3, 4, 3, 1)};
  auto params = init_params<double>(layers, 5);
  const auto x = random_tensor({1, 3, 6, 7}, 9);
  const auto y = infer<double>(layers, params, x);
  const auto ref = direct_conv(std::vector<double>(x.data().begin(), x.data().end()), 3, 6, 7,
                               std::vector<double>(params[0].data().begin(), params[0].data().end()), 4, 3, 1);
  REQUIRE(y.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == Catch::Approx(ref[i]).margin(1e-12));
}

TEST_CASE("replicate padding keeps constant planes constant", "[tensor][forward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(2, 3, 3, 1, 1, PadMode::replicate)};
  const auto params = init_params<double>(layers, 3);
  const BasicTensor<double> x({1, 2, 5, 5}, 0.25);
  const auto y = infer<double>(layers, params, x);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 1; i < 25; ++i) CHECK(y[c * 25 + i] == Catch::Approx(y[c * 25]).margin(1e-12));
}

TEST_CASE("forward is bit-deterministic", "[tensor][forward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(3, 8, 3, 1), LayerSpec::of(LayerKind::relu),
                                      LayerSpec::of(LayerKind::maxpool2), LayerSpec::of(LayerKind::global_avg_pool),
                                      LayerSpec::linear(8, 2)};
  const auto params = init_params<float>(layers, 17);
  const auto x = random_tensor({4, 3, 16, 16}, 2).cast<float>();
  CHECK(infer<float>(layers, params, x) == infer<float>(layers, params, x));
  CHECK(forward<float>(layers, params, x).output() == infer<float>(layers, params, x));
}

TEST_CASE("shape errors name the offending layer", "[tensor][errors]") {
  const std::vector<LayerSpec> layers{LayerSpec::of(LayerKind::relu), LayerSpec::conv(3, 4, 3, 1)};
  const auto params = init_params<float>(layers, 1);
  const Tensor x({1, 2, 8, 8});
  try {
    (void)infer<float>(layers, params, x);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{LayerSpec::conv(3, 4, 3, 1), LayerSpec::conv(5, 4, 3, 1)}),
                  ShapeError);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{LayerSpec::conv(3, 4, 0, 1)}), ShapeError);
}

TEST_CASE("backward of sum through an identity net gives unit input gradient", "[tensor][backward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(2, 2, 1, 0)};
  ParamSet<double> params{BasicTensor<double>({2, 2, 1, 1}), BasicTensor<double>({2}, 0.0)};
  params[0][0] = params[0][3] = 1.0;
  const auto x = random_tensor({1, 2, 3, 3}, 4);
  const auto g = grads_for<double>(layers, params, x, BasicTensor<double>({1, 2, 3, 3}, 1.0));
  for (double v : g.input.data()) CHECK(v == 1.0);
}

TEST_CASE("zero output gradient gives zero parameter gradients", "[tensor][backward]") {
  const std::vector<LayerSpec> layers{LayerSpec::conv(3, 4, 3, 1), LayerSpec::of(LayerKind::relu),
                                      LayerSpec::of(LayerKind::global_avg_pool), LayerSpec::linear(4, 2)};
  const auto params = init_params<double>(layers, 8);
  const auto x = random_tensor({2, 3, 6, 6}, 1);
  const auto g = grads_for<double>(layers, params, x, BasicTensor<double>({2, 2}, 0.0));
  for (const auto& p : g.params)
    for (double v : p.data()) CHECK(v == 0.0);
}

TEST_CASE("backward requires a forward trace", "[tensor][errors]") {
  Trace<double> empty;
  CHECK_THROWS_AS(backward<double>(empty, {}, BasicTensor<double>({1})), Error);
  const std::vector<LayerSpec> layers{LayerSpec::of(LayerKind::sigmoid)};
  const auto trace = forward<double>(layers, {}, BasicTensor<double>({1, 4}, 0.5));
  CHECK_THROWS_AS(backward<double>(trace, {}, BasicTensor<double>({1, 5})), ShapeError);
}

TEST_CASE("finite-difference gradient check for every layer kind", "[tensor][gradcheck]") {
  struct Case {
    const char* name;
    std::vector<LayerSpec> layers;
    Shape input;
  };
  const std::vector<Case> cases{
      {"conv2d 3x3 zero pad", {LayerSpec::conv(2, 3, 3, 1)}, {2, 2, 5, 6}},
      {"conv2d 3x3 replicate pad", {LayerSpec::conv(2, 3, 3, 1, 1, PadMode::replicate)}, {2, 2, 5, 5}},
      {"conv2d 3x3 stride 2", {LayerSpec::conv(2, 2, 3, 1, 2)}, {1, 2, 7, 7}},
      {"conv2d 1x1", {LayerSpec::conv(4, 2, 1, 0)}, {2, 4, 3, 3}},
      {"relu", {LayerSpec::of(LayerKind::relu)}, {2, 3, 4, 4}},
      {"maxpool2", {LayerSpec::of(LayerKind::maxpool2)}, {2, 2, 6, 6}},
      {"global_avg_pool", {LayerSpec::of(LayerKind::global_avg_pool)}, {2, 3, 4, 5}},
      {"linear", {LayerSpec::linear(5, 3)}, {4, 5}},
      {"bilinear_upsample x2", {LayerSpec::upsample(2)}, {1, 2, 3, 4}},
      {"bilinear_upsample x8", {LayerSpec::upsample(8)}, {2, 1, 2, 2}},
      {"sigmoid", {LayerSpec::of(LayerKind::sigmoid)}, {2, 3, 3, 3}},
      {"softmax rank 2", {LayerSpec::of(LayerKind::softmax)}, {3, 4}},
      {"softmax rank 4", {LayerSpec::of(LayerKind::softmax)}, {2, 3, 2, 2}},
  };
  for (const auto& c : cases) {
    INFO(c.name);
    const auto r = check_stack(c.layers, c.input, 21);
    CHECK(r.checked >= 5);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("bilinear upsampling then average pooling restores constant inputs", "[tensor][forward]") {
  for (std::size_t factor : {2u, 3u, 8u}) {
    const std::vector<LayerSpec> layers{LayerSpec::upsample(factor)};
    const BasicTensor<float> x({1, 2, 3, 5}, 0.37f);
    const auto up = infer<float>(layers, {}, x);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          double acc = 0.0;
          for (std::size_t a = 0; a < factor; ++a)
            for (std::size_t b = 0; b < factor; ++b)
              acc += up[(c * 3 * factor + i * factor + a) * 5 * factor + j * factor + b];
          CHECK(std::abs(acc / static_cast<double>(factor * factor) - 0.37) <= 1e-5);
        }
  }
}

TEST_CASE("Adam: zero gradients leave parameters unchanged", "[optimizer]") {
  OptimizerState<float> state;
  ParamSet<float> params{Tensor({3}, {0.5f, -1.0f, 2.0f})};
  const auto before = params;
  optimizer_step(state, params, ParamSet<float>{Tensor({3}, 0.0f)});
  CHECK(params == before);
  CHECK(state.step == 1);
  optimizer_step(state, params, ParamSet<float>{Tensor({3}, 0.0f)});
  CHECK(state.step == 2);
}

TEST_CASE("Adam: first step moves by about the learning rate", "[optimizer]") {
  OptimizerState<double> state;
  state.config.learning_rate = 0.1;
  ParamSet<double> p{BasicTensor<double>({1}, 0.0)};
  optimizer_step(state, p, ParamSet<double>{BasicTensor<double>({1}, 1.0)});
  // m_hat = 1, v_hat = 1 after bias correction: update = lr / (1 + eps).
  CHECK(p[0][0] == Catch::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("Adam minimises p^2 from p = 1 within 500 steps", "[optimizer]") {
  OptimizerState<double> state;
  state.config.learning_rate = 0.05;
  ParamSet<double> p{BasicTensor<double>({1}, 1.0)};
  int steps = 0;
  while (std::abs(p[0][0]) >= 1e-2 && steps < 500) {
    optimizer_step(state, p, ParamSet<double>{BasicTensor<double>({1}, 2.0 * p[0][0])});
    ++steps;
  }
  CHECK(std::abs(p[0][0]) < 1e-2);
  CHECK(steps <= 500);
}

TEST_CASE("Adam rejects NaN gradients without touching state", "[optimizer][errors]") {
  OptimizerState<float> state;
  ParamSet<float> params{Tensor({2}, {1.0f, 2.0f})};
  optimizer_step(state, params, ParamSet<float>{Tensor({2}, {0.5f, 0.5f})});
  const auto params_before = params;
  const auto m_before = state.first_moment;
  const auto v_before = state.second_moment;
  ParamSet<float> bad{Tensor({2}, {0.1f, std::numeric_limits<float>::quiet_NaN()})};
  CHECK_THROWS_AS(optimizer_step(state, params, bad), NumericError);
  CHECK(params == params_before);
  CHECK(state.first_moment == m_before);
  CHECK(state.second_moment == v_before);
  CHECK(state.step == 1);
}
