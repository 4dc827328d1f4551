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

// Evidence-combination view of OOD detection.
//
// M one-vs-rest binary posteriors P^b_i = sigmoid(T - s_i) are fused with
// the Dempster-Shafer rule into M class masses plus one OOD mass. The result
// equals a softmax over (-s_1, ..., -s_M, -T), which in turn factorizes into
// an ID classifier softmax(-s) times an image-level OOD factor. Each route
// is computed independently here so the identities can be checked.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ssod/error.hpp"
#include "ssod/rng.hpp"

namespace ssod::dst {

struct BinaryScores {
  std::vector<double> s;
  double bias = 0.0;  // T
};

struct PosteriorSet {
  std::vector<double> class_probs;
  double ood_prob = 0.0;
  std::vector<double> id_factor;
  double ood_factor = 0.0;
};

namespace detail {

inline double logsumexp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

}  // namespace detail

/// Above this class count dst_combine switches to log-domain products.
inline constexpr std::size_t kLogDomainThreshold = 32;

/// P^b(w_i|x) = 1 / (1 + exp(s_i - T)).
inline std::vector<double> binary_posterior(const BinaryScores& scores) {
  std::vector<double> out(scores.s.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = scores.bias - scores.s[i];
    out[i] = g >= 0 ? 1.0 / (1.0 + std::exp(-g)) : std::exp(g) / (1.0 + std::exp(g));
  }
  return out;
}

/// Dempster-Shafer fusion of one-vs-rest posteriors:
///   P(w_i) = pb_i * prod_{j!=i}(1 - pb_j) / Z,  P(w_{M+1}) = prod_j (1 - pb_j) / Z.
inline PosteriorSet dst_combine(std::span<const double> pb) {
  if (pb.empty()) throw ConfigError("dst_combine: need at least one class");
  for (double p : pb) {
    if (!(p > 0.0 && p < 1.0)) {
      throw ConfigError("dst_combine: binary posteriors must lie strictly inside (0,1), got " + std::to_string(p));
    }
  }
  const std::size_t m = pb.size();
  PosteriorSet out;
  out.class_probs.resize(m);

  if (m <= kLogDomainThreshold) {
    // prefix[i] = prod_{j<i}(1-pb_j), suffix[i] = prod_{j>=i}(1-pb_j); no divisions.
    std::vector<double> prefix(m + 1, 1.0), suffix(m + 1, 1.0);
    for (std::size_t i = 0; i < m; ++i) prefix[i + 1] = prefix[i] * (1.0 - pb[i]);
    for (std::size_t i = m; i-- > 0;) suffix[i] = suffix[i + 1] * (1.0 - pb[i]);
    double z = prefix[m];
    for (std::size_t i = 0; i < m; ++i) {
      out.class_probs[i] = pb[i] * prefix[i] * suffix[i + 1];
      z += out.class_probs[i];
    }
    for (auto& p : out.class_probs) p /= z;
    out.ood_prob = prefix[m] / z;
  } else {
    std::vector<double> log_rest(m);
    double log_all = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      log_rest[i] = std::log1p(-pb[i]);
      log_all += log_rest[i];
    }
    std::vector<double> terms(m + 1);
    for (std::size_t i = 0; i < m; ++i) terms[i] = std::log(pb[i]) + (log_all - log_rest[i]);
    terms[m] = log_all;
    const double log_z = detail::logsumexp(terms);
    for (std::size_t i = 0; i < m; ++i) out.class_probs[i] = std::exp(terms[i] - log_z);
    out.ood_prob = std::exp(terms[m] - log_z);
  }
  return out;
}

/// Softmax over (-s_1, ..., -s_M, -T): the closed form of the fused posterior.
inline PosteriorSet extended_softmax(const BinaryScores& scores) {
  if (scores.s.empty()) throw ConfigError("extended_softmax: need at least one class");
  std::vector<double> neg(scores.s.size() + 1);
  for (std::size_t i = 0; i < scores.s.size(); ++i) neg[i] = -scores.s[i];
  neg.back() = -scores.bias;
  const double lse = detail::logsumexp(neg);
  PosteriorSet out;
  out.class_probs.resize(scores.s.size());
  for (std::size_t i = 0; i < scores.s.size(); ++i) out.class_probs[i] = std::exp(neg[i] - lse);
  out.ood_prob = std::exp(neg.back() - lse);
  return out;
}

/// ID factor softmax(-s) and OOD factor sum_j e^{-s_j} / (sum_j e^{-s_j} + e^{-T}).
inline PosteriorSet factorize(const BinaryScores& scores) {
  if (scores.s.empty()) throw ConfigError("factorize: need at least one class");
  std::vector<double> neg(scores.s.size());
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -scores.s[i];
  const double lse = detail::logsumexp(neg);
  PosteriorSet out;
  out.id_factor.resize(neg.size());
  for (std::size_t i = 0; i < neg.size(); ++i) out.id_factor[i] = std::exp(neg[i] - lse);
  // sigmoid(lse + T), written to avoid overflow on either side.
  const double a = lse + scores.bias;
  out.ood_factor = a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
  out.class_probs.resize(neg.size());
  for (std::size_t i = 0; i < neg.size(); ++i) out.class_probs[i] = out.id_factor[i] * out.ood_factor;
  out.ood_prob = 1.0 - out.ood_factor;
  return out;
}

struct IdentityReport {
  std::size_t draws = 0;
  double max_combine_vs_softmax = 0.0;   // DST fusion vs closed form
  double max_factorized_vs_softmax = 0.0;  // ID x OOD factors vs closed form
  double max_normalization_error = 0.0;  // over all three routes
  std::size_t argmax_mismatches = 0;     // class_probs vs id_factor
  double seconds = 0.0;

  double max_error() const {
    return std::max({max_combine_vs_softmax, max_factorized_vs_softmax, max_normalization_error});
  }
};

/// Random (s, T, M) draws with s, T uniform in [-range, range] and M uniform
/// in [1, max_classes]; compares the three routes elementwise.
inline IdentityReport check_identities(std::size_t draws, std::uint64_t seed, std::size_t max_classes = 8,
                                       double range = 5.0) {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(seed);
  IdentityReport rep;
  rep.draws = draws;
  for (std::size_t d = 0; d < draws; ++d) {
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(max_classes)));
    BinaryScores sc;
    sc.s.resize(m);
    for (auto& v : sc.s) v = rng.uniform(-range, range);
    sc.bias = rng.uniform(-range, range);

    const auto fused = dst_combine(binary_posterior(sc));
    const auto closed = extended_softmax(sc);
    const auto fact = factorize(sc);

    double sum_fused = fused.ood_prob, sum_closed = closed.ood_prob, sum_fact = fact.ood_prob;
    rep.max_combine_vs_softmax = std::max(rep.max_combine_vs_softmax, std::abs(fused.ood_prob - closed.ood_prob));
    rep.max_factorized_vs_softmax = std::max(rep.max_factorized_vs_softmax, std::abs(fact.ood_prob - closed.ood_prob));
    double id_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      rep.max_combine_vs_softmax =
          std::max(rep.max_combine_vs_softmax, std::abs(fused.class_probs[i] - closed.class_probs[i]));
      rep.max_factorized_vs_softmax =
          std::max(rep.max_factorized_vs_softmax, std::abs(fact.id_factor[i] * fact.ood_factor - closed.class_probs[i]));
      sum_fused += fused.class_probs[i];
      sum_closed += closed.class_probs[i];
      sum_fact += fact.class_probs[i];
      id_sum += fact.id_factor[i];
    }
    for (double s : {sum_fused, sum_closed, sum_fact, id_sum}) {
      rep.max_normalization_error = std::max(rep.max_normalization_error, std::abs(s - 1.0));
    }
    const auto a = std::max_element(closed.class_probs.begin(), closed.class_probs.end()) - closed.class_probs.begin();
    const auto b = std::max_element(fact.id_factor.begin(), fact.id_factor.end()) - fact.id_factor.begin();
    if (a != b) ++rep.argmax_mismatches;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace ssod::dst
