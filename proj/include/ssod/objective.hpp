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

// Self-supervised patch labels and the joint training objective.
//
// A patch is labeled ID when the classifier's confidence on the image's
// ground-truth class is at least gamma, OOD when it is below 1 - gamma, and
// left out otherwise. The OOD head is trained on those labels with one of
// three ways of handling the ID/OOD imbalance (LW, DR, LWB).

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssod/error.hpp"
#include "ssod/nets.hpp"
#include "ssod/ops.hpp"
#include "ssod/rng.hpp"
#include "ssod/tensor.hpp"

namespace ssod {

enum class PatchLabel : std::int8_t { kOod = 0, kId = 1, kNotApplicable = -1 };

/// LW: loss weighting, DR: data resampling, LWB: loss-wise balance.
enum class BalanceScheme { kLW, kDR, kLWB };

inline std::string_view to_string(BalanceScheme s) {
  switch (s) {
    case BalanceScheme::kLW: return "LW";
    case BalanceScheme::kDR: return "DR";
    case BalanceScheme::kLWB: return "LWB";
  }
  return "?";
}

inline BalanceScheme parse_scheme(std::string_view name) {
  if (name == "LW" || name == "lw") return BalanceScheme::kLW;
  if (name == "DR" || name == "dr") return BalanceScheme::kDR;
  if (name == "LWB" || name == "lwb") return BalanceScheme::kLWB;
  throw ConfigError("unknown balancing scheme '" + std::string(name) + "' (expected LW, DR or LWB)");
}

struct SamplerConfig {
  double gamma = 0.95;
  BalanceScheme scheme = BalanceScheme::kLWB;
  double alpha = 1.0;
  /// LW factor on OOD-patch terms; unset means #ID / #OOD over the batch.
  std::optional<double> lw_weight;
  std::uint64_t rng_seed = 0;
};

struct PatchLabelMap {
  std::size_t height = 0, width = 0;
  std::vector<PatchLabel> labels;
  std::size_t id_count = 0, ood_count = 0, na_count = 0;
};

inline void check_gamma(double gamma) {
  if (!(gamma > 0.5 && gamma <= 1.0)) {
    throw ConfigError("gamma must lie in (0.5, 1] so the ID and OOD bands are disjoint, got " + std::to_string(gamma));
  }
}

/// Bands are compared in single precision, the precision of confidence
/// maps, so that decimal thresholds behave as written: with gamma = 0.95 a
/// confidence of exactly 0.05 is N/A, not OOD.
inline PatchLabel label_patch(float confidence, double gamma) {
  const float ood_below = static_cast<float>(1.0 - gamma);
  const float id_from = static_cast<float>(gamma);
  if (confidence < ood_below) return PatchLabel::kOod;
  if (confidence >= id_from) return PatchLabel::kId;
  return PatchLabel::kNotApplicable;
}

inline PatchLabelMap sample_patch_labels(const TargetConfidenceMap& tcm, double gamma) {
  check_gamma(gamma);
  PatchLabelMap out{tcm.height, tcm.width, {}, 0, 0, 0};
  out.labels.reserve(tcm.values.size());
  for (float c : tcm.values) {
    const PatchLabel l = label_patch(c, gamma);
    out.labels.push_back(l);
    if (l == PatchLabel::kId) ++out.id_count;
    else if (l == PatchLabel::kOod) ++out.ood_count;
    else ++out.na_count;
  }
  return out;
}

template <typename T = float>
struct OodLossResult {
  BasicTensor<T> loss;
  /// False when no image in the batch had usable patches; loss is then 0.
  bool supervised = false;
  std::size_t supervised_images = 0;
  /// LWB images where only one of ID/OOD was present.
  std::size_t single_class_images = 0;
};

/// Per-patch weights realizing one scheme on one image. Returns false when
/// the image provides no supervision under the scheme.
inline bool scheme_weights(const PatchLabelMap& labels, BalanceScheme scheme, double lw_weight, Rng& rng,
                           std::span<float> weights, bool& single_class) {
  const std::size_t n_id = labels.id_count, n_ood = labels.ood_count;
  single_class = false;
  std::fill(weights.begin(), weights.end(), 0.0f);
  switch (scheme) {
    case BalanceScheme::kLW: {
      if (n_id + n_ood == 0) return false;
      const double denom = static_cast<double>(n_id + n_ood);
      for (std::size_t i = 0; i < labels.labels.size(); ++i) {
        if (labels.labels[i] == PatchLabel::kId) weights[i] = static_cast<float>(1.0 / denom);
        else if (labels.labels[i] == PatchLabel::kOod) weights[i] = static_cast<float>(lw_weight / denom);
      }
      return true;
    }
    case BalanceScheme::kDR: {
      if (n_id == 0 || n_ood == 0) return false;
      const std::size_t k = std::min(n_id, n_ood);
      std::vector<std::size_t> ids, oods;
      for (std::size_t i = 0; i < labels.labels.size(); ++i) {
        if (labels.labels[i] == PatchLabel::kId) ids.push_back(i);
        else if (labels.labels[i] == PatchLabel::kOod) oods.push_back(i);
      }
      rng.shuffle(ids);
      rng.shuffle(oods);
      const float w = static_cast<float>(1.0 / static_cast<double>(2 * k));
      for (std::size_t j = 0; j < k; ++j) {
        weights[ids[j]] = w;
        weights[oods[j]] = w;
      }
      return true;
    }
    case BalanceScheme::kLWB: {
      if (n_id + n_ood == 0) return false;
      single_class = n_id == 0 || n_ood == 0;
      const double half = single_class ? 1.0 : 0.5;
      for (std::size_t i = 0; i < labels.labels.size(); ++i) {
        if (labels.labels[i] == PatchLabel::kId) weights[i] = static_cast<float>(half / static_cast<double>(n_id));
        else if (labels.labels[i] == PatchLabel::kOod) weights[i] = static_cast<float>(half / static_cast<double>(n_ood));
      }
      return true;
    }
  }
  return false;
}

/// Default LW factor: #ID / #OOD patches over the batch (1 when no OOD patch).
inline double default_lw_weight(std::span<const PatchLabelMap> labels) {
  std::size_t n_id = 0, n_ood = 0;
  for (const auto& l : labels) {
    n_id += l.id_count;
    n_ood += l.ood_count;
  }
  return n_ood == 0 ? 1.0 : static_cast<double>(n_id) / static_cast<double>(n_ood);
}

/// BCE of the OOD head against self-supervised labels.
///
/// `logits` is [N,H,W] (or [H,W] for a single image). Each supervised image
/// contributes its scheme-specific loss; the result is their mean. N/A
/// patches always have zero weight.
template <typename T>
OodLossResult<T> ood_head_loss(const BasicTensor<T>& logits, std::span<const PatchLabelMap> labels, BalanceScheme scheme,
                                   Rng& rng, std::optional<double> lw_weight = std::nullopt) {
  const std::size_t n = labels.size();
  detail::require(n > 0, "ood_head_loss: no label maps");
  const std::size_t hw = labels[0].labels.size();
  if (logits.size() != n * hw) {
    throw ConfigError("ood_head_loss: logits of shape " + shape_str(logits.shape()) + " do not match " +
                      std::to_string(n) + " label maps of " + std::to_string(hw) + " patches");
  }
  const double lw = lw_weight.value_or(default_lw_weight(labels));
  if (scheme == BalanceScheme::kLW && !(lw > 0.0)) throw ConfigError("ood_head_loss: lw_weight must be positive");

  std::vector<float> targets(n * hw, 0.0f), weights(n * hw, 0.0f);
  OodLossResult<T> res;
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b].labels.size() != hw) throw ConfigError("ood_head_loss: label maps differ in size");
    std::span<float> w(weights.data() + b * hw, hw);
    bool single = false;
    if (scheme_weights(labels[b], scheme, lw, rng, w, single)) {
      ++res.supervised_images;
      if (single) ++res.single_class_images;
    }
    for (std::size_t i = 0; i < hw; ++i) targets[b * hw + i] = labels[b].labels[i] == PatchLabel::kId ? 1.0f : 0.0f;
  }
  res.supervised = res.supervised_images > 0;
  if (res.supervised) {
    const float inv = 1.0f / static_cast<float>(res.supervised_images);
    for (auto& w : weights) w *= inv;
  }
  res.loss = weighted_bce_with_logits(logits, targets, weights);
  return res;
}

/// L = CE(y_hat, y) + alpha * CE(y_hat_ood, y_ood).
template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& cls_loss, const BasicTensor<T>& ood_loss, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
  return add(cls_loss, scale(ood_loss, static_cast<T>(alpha)));
}

/// Image-level labels for a batch: target slice of each confidence map, then
/// the three-way split.
inline std::vector<PatchLabelMap> label_batch(const std::vector<ConfidenceMap>& maps, std::span<const int> targets,
                                              double gamma) {
  detail::require(maps.size() == targets.size(), "label_batch: one target per confidence map required");
  std::vector<PatchLabelMap> out;
  out.reserve(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) out.push_back(sample_patch_labels(target_slice(maps[i], targets[i]), gamma));
  return out;
}

}  // namespace ssod
