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

// Central finite-difference gradient checks in double precision.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ssod/ops.hpp"
#include "ssod/rng.hpp"
#include "ssod/tensor.hpp"

namespace ssod::testing {

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

struct GradCheckOptions {
  std::size_t samples = 50;  // coordinates per parameter (all if fewer)
  double step = 1e-6;
  double kink_tolerance = 1e-3;  // one-sided slopes disagreeing by more than this mark a ReLU kink
  double abs_floor = 1e-10;      // |a - n| below this counts as exact
  std::uint64_t seed = 1;
};

/// Relative error with the convention used across the audits.
inline double rel_error(double analytic, double numeric, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

/// Compares backward() against central differences of `loss` for sampled
/// coordinates of each tensor in `params`. `loss` must rebuild the graph
/// from the current parameter values on every call.
inline GradCheckResult check_gradients(const std::function<TensorD()>& loss, std::vector<TensorD> params,
                                       const GradCheckOptions& opt = {}, const std::string& label = "") {
  for (auto& p : params) p.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckResult res;
  Rng rng(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    if (idx.size() > opt.samples) idx.resize(opt.samples);
    for (std::size_t i : idx) {
      auto data = p.mutable_data();
      const double saved = data[i];
      double f0, fp, fm;
      {
        NoGradGuard no_grad;
        f0 = loss().item();
        data[i] = saved + opt.step;
        fp = loss().item();
        data[i] = saved - opt.step;
        fm = loss().item();
        data[i] = saved;
      }
      const double right = (fp - f0) / opt.step, left = (f0 - fm) / opt.step;
      if (rel_error(right, left, 1e-7) > opt.kink_tolerance) {
        ++res.skipped_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double err = rel_error(analytic[pi][i], numeric, opt.abs_floor);
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = label + " param " + std::to_string(pi) + " index " + std::to_string(i) + ": analytic " +
                    std::to_string(analytic[pi][i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

/// Random tensor with entries uniform in [lo, hi].
inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(v), requires_grad);
}

/// sum(r * t) for a fixed random r: a scalar whose gradient w.r.t. t is r,
/// used to reduce non-scalar op outputs.
inline TensorD project(const TensorD& t, const std::vector<double>& r) {
  const TensorD flat = reshape(t, {1, t.size()});
  const TensorD w(Shape{t.size(), 1}, r);
  return reshape(linear(flat, w, TensorD::zeros({1})), {});
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> r(n);
  for (auto& x : r) x = rng.uniform(-1.0, 1.0);
  return r;
}

}  // namespace ssod::testing
