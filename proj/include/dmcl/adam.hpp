#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dmcl/tensor.hpp"

namespace dmcl {

struct AdamSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamSettings settings;
  std::uint64_t step_count = 0;
  std::vector<T> first_moment;
  std::vector<T> second_moment;

  AdamState() = default;
  AdamState(std::size_t parameter_count, AdamSettings s)
      : settings(s), first_moment(parameter_count, T{0}), second_moment(parameter_count, T{0}) {}
};

// One bias-corrected Adam update. Coordinates with a nonzero entry in
// `frozen` keep their parameter and moments untouched.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               std::span<const std::uint8_t> frozen = {}) {
  if (grads.size() != params.size()) throw ShapeError("adam_step gradients", Shape{params.size()}, Shape{grads.size()});
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw ShapeError("adam_step moments", Shape{params.size()}, Shape{state.first_moment.size()});
  if (!frozen.empty() && frozen.size() != params.size())
    throw ShapeError("adam_step frozen mask", Shape{params.size()}, Shape{frozen.size()});

  ++state.step_count;
  const auto& s = state.settings;
  const double t = static_cast<double>(state.step_count);
  const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(s.beta1, t));
  const T correction2 = static_cast<T>(1.0 - std::pow(s.beta2, t));
  const T lr = static_cast<T>(s.learning_rate), eps = static_cast<T>(s.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    const T g = grads[i];
    T& m = state.first_moment[i];
    T& v = state.second_moment[i];
    m = b1 * m + (T{1} - b1) * g;
    v = b2 * v + (T{1} - b2) * g * g;
    const T m_hat = m / correction1;
    const T v_hat = v / correction2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

}  // namespace dmcl
