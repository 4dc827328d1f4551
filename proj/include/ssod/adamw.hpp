/*
 * Copyright 2026 The SSOD Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssod/error.hpp"
#include "ssod/tensor.hpp"

namespace ssod {

struct AdamWState {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  AdamWState() = default;
  AdamWState(double lr_, double weight_decay_) : lr(lr_), weight_decay(weight_decay_) {}

  template <typename T>
  void init(std::span<const BasicTensor<T>> params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.size(), 0.0f);
      v.emplace_back(p.size(), 0.0f);
    }
    step = 0;
  }
};

/// One decoupled-weight-decay Adam update on every parameter.
///
/// The whole step is rejected (nothing modified) if any gradient is NaN or
/// infinite; NumericError is thrown to the caller.
template <typename T>
void adamw_step(std::span<BasicTensor<T>> params, AdamWState& state) {
  if (state.m.size() != params.size()) throw ConfigError("adamw_step: optimizer state not initialized for these parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size()) {
      throw ConfigError("adamw_step: moment shape mismatch for parameter " + std::to_string(i));
    }
    if (!params[i].has_grad()) continue;
    for (T g : params[i].impl()->grad) {
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const T decay = static_cast<T>(1.0 - state.lr * state.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const auto& grad = params[i].impl()->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      data[j] *= decay;
      m[j] = static_cast<float>(state.beta1 * m[j] + (1.0 - state.beta1) * g);
      v[j] = static_cast<float>(state.beta2 * v[j] + (1.0 - state.beta2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace ssod
