#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "oaid/error.hpp"
#include "oaid/tensor.hpp"

namespace oaid {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  AdamConfig config;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
};

// Bias-corrected Adam. Gradients are checked before anything is touched, so a
// NaN leaves both parameters and moments exactly as they were.
template <typename T>
void optimizer_step(OptimizerState<T>& state, ParamSet<T>& params, const ParamSet<T>& grads) {
  if (params.size() != grads.size())
    throw ShapeError("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape())
      throw ShapeError("gradient " + std::to_string(i) + " shape " + shape_string(grads[i].shape()) +
                       " does not match parameter " + shape_string(params[i].shape()));
    require_finite(grads[i].data(), "gradient " + std::to_string(i));
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T{0});
      state.second_moment.emplace_back(p.size(), T{0});
    }
  }
  if (state.first_moment.size() != params.size())
    throw ShapeError("optimizer state tracks a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first_moment[i].size() != params[i].size())
      throw ShapeError("optimizer moment buffer " + std::to_string(i) + " does not match its parameter");

  const auto& c = state.config;
  const std::uint64_t t = state.step + 1;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = c.learning_rate * (mj / correction1) / (std::sqrt(vj / correction2) + c.eps);
      p[j] = static_cast<T>(p[j] - update);
    }
  }
  state.step = t;
}

}  // namespace oaid
