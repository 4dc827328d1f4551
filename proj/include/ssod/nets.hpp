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

// Backbone plus classification and OOD heads.
//
// The backbone is a stack of 3x3 stride-2 conv + ReLU blocks. The
// classification head is one affine map used both on the pooled feature and
// independently at every spatial location of the final feature map. The OOD
// head is a single-logit affine map used the same two ways: per location for
// the patch loss, and on the pooled feature for the image-level OOD factor.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssod/error.hpp"
#include "ssod/ops.hpp"
#include "ssod/rng.hpp"
#include "ssod/ssdt.hpp"
#include "ssod/tensor.hpp"

namespace ssod {

struct ModelConfig {
  /// Channel widths from the image channels to the final feature width;
  /// blocks = widths.size() - 1.
  std::vector<std::size_t> widths{3, 32, 64, 128, 128};
  std::size_t num_classes = 4;
  std::size_t kernel = 3;
  std::size_t input_extent = 64;

  std::size_t blocks() const { return widths.size() - 1; }
  std::size_t feature_channels() const { return widths.back(); }
  std::size_t downsampling() const { return std::size_t{1} << blocks(); }
};

/// Per-location class posteriors of one image, laid out [M][H][W].
struct ConfidenceMap {
  std::size_t classes = 0, height = 0, width = 0;
  std::vector<float> values;

  float at(std::size_t m, std::size_t y, std::size_t x) const { return values[(m * height + y) * width + x]; }
};

/// Ground-truth-class slice of a ConfidenceMap, laid out [H][W].
struct TargetConfidenceMap {
  std::size_t height = 0, width = 0;
  std::vector<float> values;
};

struct JointPosterior {
  std::size_t classes = 0;
  std::vector<float> class_probs;  // [N][M]
  std::vector<float> ood_mass;     // [N]
};

template <typename T>
class BasicModel {
 public:
  using Tensor = BasicTensor<T>;

  explicit BasicModel(ModelConfig cfg = {}, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    detail::require(cfg_.widths.size() >= 2, "model needs at least one conv block");
    detail::require(cfg_.num_classes >= 1, "model needs at least one class");
    Rng rng(seed);
    const std::size_t k = cfg_.kernel;
    for (std::size_t b = 0; b < cfg_.blocks(); ++b) {
      const std::size_t cin = cfg_.widths[b], cout = cfg_.widths[b + 1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
      conv_w_.push_back(uniform_param({cout, cin, k, k}, bound, rng));
      conv_b_.push_back(uniform_param({cout}, bound, rng));
    }
    const std::size_t c = cfg_.feature_channels();
    const double bound = 1.0 / std::sqrt(static_cast<double>(c));
    cls_w_ = uniform_param({c, cfg_.num_classes}, bound, rng);
    cls_b_ = uniform_param({cfg_.num_classes}, bound, rng);
    // The OOD head starts at zero: an untrained head scores every input 0.5.
    ood_w_ = Tensor::zeros({c, 1}, true);
    ood_b_ = Tensor::zeros({1}, true);
  }

  const ModelConfig& config() const { return cfg_; }

  /// All learnable tensors, in checkpoint order.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (std::size_t b = 0; b < conv_w_.size(); ++b) {
      out.push_back(conv_w_[b]);
      out.push_back(conv_b_[b]);
    }
    out.insert(out.end(), {cls_w_, cls_b_, ood_w_, ood_b_});
    return out;
  }

  /// Deep copy; the copy shares no storage with this model.
  BasicModel clone() const { return cast<T>(); }

  /// Copy with parameters converted to U.
  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out(cfg_, 0);
    const auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].data().begin(), src[i].data().end(), dst[i].mutable_data().begin());
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  /// h(x): [N,3,H,W] -> [N,C,H/R,W/R].
  Tensor forward_features(const Tensor& images) const {
    detail::check_rank(images, 4, "forward_features", "images");
    if (images.dim(1) != cfg_.widths.front()) {
      throw ConfigError("forward_features: expected " + std::to_string(cfg_.widths.front()) + " image channels, got " +
                        std::to_string(images.dim(1)));
    }
    const std::size_t r = cfg_.downsampling();
    for (std::size_t axis : {2u, 3u}) {
      const std::size_t extent = images.dim(axis);
      if (extent % r != 0) {
        throw ConfigError("forward_features: image " + std::string(axis == 2 ? "height " : "width ") +
                          std::to_string(extent) + " is not divisible by the downsampling rate " + std::to_string(r) +
                          "; pad by " + std::to_string(r - extent % r) + " pixels");
      }
    }
    Tensor x = images;
    for (std::size_t b = 0; b < conv_w_.size(); ++b) x = relu(conv2d(x, conv_w_[b], conv_b_[b], 2, cfg_.kernel / 2));
    return x;
  }

  /// f_cls(GAP(X)) logits, [N,M].
  Tensor pooled_logits(const Tensor& fm) const { return linear(gap(check_fm(fm)), cls_w_, cls_b_); }

  /// f_cls at every location, [N*H*W, M] with rows ordered (n, y, x).
  Tensor patch_logits(const Tensor& fm) const { return linear(to_rows(check_fm(fm)), cls_w_, cls_b_); }

  /// f_ood at every location, [N,H,W].
  Tensor ood_patch_logits(const Tensor& fm) const {
    check_fm(fm);
    return reshape(linear(to_rows(fm), ood_w_, ood_b_), {fm.dim(0), fm.dim(2), fm.dim(3)});
  }

  /// f_ood(GAP(X)), [N,1].
  Tensor ood_pooled_logit(const Tensor& fm) const { return linear(gap(check_fm(fm)), ood_w_, ood_b_); }

  // Named access for checkpoints and tests.
  Tensor& conv_weight(std::size_t b) { return conv_w_.at(b); }
  Tensor& conv_bias(std::size_t b) { return conv_b_.at(b); }
  Tensor& cls_weight() { return cls_w_; }
  Tensor& cls_bias() { return cls_b_; }
  Tensor& ood_weight() { return ood_w_; }
  Tensor& ood_bias() { return ood_b_; }
  const Tensor& cls_weight() const { return cls_w_; }
  const Tensor& cls_bias() const { return cls_b_; }

  void save(const std::filesystem::path& index_path) const;
  static BasicModel load(const std::filesystem::path& index_path);

 private:
  static Tensor uniform_param(Shape shape, double bound, Rng& rng) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor(std::move(shape), std::move(v), true);
  }

  const Tensor& check_fm(const Tensor& fm) const {
    detail::check_rank(fm, 4, "feature map", "input");
    if (fm.dim(1) != cfg_.feature_channels()) {
      throw ConfigError("feature map has " + std::to_string(fm.dim(1)) + " channels, heads expect " +
                        std::to_string(cfg_.feature_channels()));
    }
    return fm;
  }

  ModelConfig cfg_;
  std::vector<Tensor> conv_w_, conv_b_;
  Tensor cls_w_, cls_b_, ood_w_, ood_b_;
};

using SsodModel = BasicModel<float>;
using SsodModelD = BasicModel<double>;

/// softmax(f_cls(GAP(X))), rows sum to one. [N][M]
template <typename T>
std::vector<float> classify_pooled(const BasicModel<T>& model, const BasicTensor<T>& fm) {
  NoGradGuard no_grad;
  const BasicTensor<T> logits = model.pooled_logits(fm);
  const auto p = softmax_rows<T>(logits.data(), logits.dim(0), logits.dim(1));
  return std::vector<float>(p.begin(), p.end());
}

/// Per-location class posteriors, one map per image.
template <typename T>
std::vector<ConfidenceMap> patch_confidence_map(const BasicModel<T>& model, const BasicTensor<T>& fm) {
  NoGradGuard no_grad;
  const BasicTensor<T> logits = model.patch_logits(fm);
  const std::size_t n = fm.dim(0), h = fm.dim(2), w = fm.dim(3), m = logits.dim(1);
  const auto probs = softmax_rows<T>(logits.data(), logits.dim(0), m);
  std::vector<ConfidenceMap> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    auto& cm = out[b];
    cm.classes = m;
    cm.height = h;
    cm.width = w;
    cm.values.resize(m * h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
      for (std::size_t c = 0; c < m; ++c) cm.values[c * h * w + p] = static_cast<float>(probs[(b * h * w + p) * m + c]);
    }
  }
  return out;
}

inline TargetConfidenceMap target_slice(const ConfidenceMap& cm, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= cm.classes) {
    throw ConfigError("target_slice: label " + std::to_string(label) + " outside [0, " + std::to_string(cm.classes) +
                      ")");
  }
  const std::size_t hw = cm.height * cm.width;
  TargetConfidenceMap t{cm.height, cm.width, {}};
  const auto first = cm.values.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(label) * hw);
  t.values.assign(first, first + static_cast<std::ptrdiff_t>(hw));
  return t;
}

/// P(x in S_ID | x) = sigmoid(f_ood(GAP(X))) per image.
template <typename T>
std::vector<float> ood_factor(const BasicModel<T>& model, const BasicTensor<T>& fm) {
  NoGradGuard no_grad;
  const BasicTensor<T> z = model.ood_pooled_logit(fm);
  std::vector<float> out(z.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(detail::sigmoid(z.data()[i]));
  return out;
}

/// Class posteriors scaled by the OOD factor; the remainder is the OOD mass.
inline JointPosterior combine_posterior(std::span<const float> class_probs, std::span<const float> factor,
                                        std::size_t classes) {
  detail::require(class_probs.size() == factor.size() * classes, "combine_posterior: size mismatch");
  JointPosterior jp{classes, std::vector<float>(class_probs.size()), std::vector<float>(factor.size())};
  for (std::size_t i = 0; i < factor.size(); ++i) {
    for (std::size_t c = 0; c < classes; ++c) jp.class_probs[i * classes + c] = class_probs[i * classes + c] * factor[i];
    jp.ood_mass[i] = 1.0f - factor[i];
  }
  return jp;
}

template <typename T>
JointPosterior joint_posterior(const BasicModel<T>& model, const BasicTensor<T>& images) {
  NoGradGuard no_grad;
  const BasicTensor<T> fm = model.forward_features(images);
  return combine_posterior(classify_pooled(model, fm), ood_factor(model, fm), model.config().num_classes);
}

// Checkpoint: one file of concatenated SSDT records plus a JSON index.

namespace detail {

struct ParamInfo {
  std::string name;
  int block;
  std::string role;
};

inline std::vector<ParamInfo> param_infos(std::size_t blocks) {
  std::vector<ParamInfo> out;
  for (std::size_t b = 0; b < blocks; ++b) {
    out.push_back({"block" + std::to_string(b) + ".conv-weight", static_cast<int>(b), "conv-weight"});
    out.push_back({"block" + std::to_string(b) + ".conv-bias", static_cast<int>(b), "conv-bias"});
  }
  out.push_back({"cls-weight", -1, "cls-weight"});
  out.push_back({"cls-bias", -1, "cls-bias"});
  out.push_back({"ood-weight", -1, "ood-weight"});
  out.push_back({"ood-bias", -1, "ood-bias"});
  return out;
}

}  // namespace detail

template <typename T>
void BasicModel<T>::save(const std::filesystem::path& index_path) const {
  std::filesystem::path blob = index_path;
  blob.replace_extension(".ssdt");
  const auto params = parameters();
  const auto infos = detail::param_infos(cfg_.blocks());
  nlohmann::json index;
  index["format"] = "ssod-checkpoint";
  index["version"] = 1;
  index["tensors_file"] = blob.filename().string();
  index["num_classes"] = cfg_.num_classes;
  index["feature_channels"] = cfg_.feature_channels();
  index["widths"] = cfg_.widths;
  index["kernel"] = cfg_.kernel;
  index["input_extent"] = cfg_.input_extent;
  std::ofstream os(blob, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + blob.string() + " for writing");
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<float> values(params[i].data().begin(), params[i].data().end());
    ssdt::write(os, params[i].shape(), values);
    nlohmann::json e;
    e["name"] = infos[i].name;
    if (infos[i].block >= 0) e["block"] = infos[i].block;
    e["role"] = infos[i].role;
    e["shape"] = params[i].shape();
    e["offset"] = offset;
    index["parameters"].push_back(e);
    offset += ssdt::record_size(params[i].shape());
  }
  os.close();
  std::ofstream js(index_path, std::ios::trunc);
  if (!js) throw IoError("cannot open " + index_path.string() + " for writing");
  js << index.dump(2) << '\n';
}

template <typename T>
BasicModel<T> BasicModel<T>::load(const std::filesystem::path& index_path) {
  std::ifstream js(index_path);
  if (!js) throw IoError("missing checkpoint index: " + index_path.string());
  nlohmann::json index;
  try {
    js >> index;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(index_path.string() + ": malformed checkpoint index: " + e.what());
  }
  if (index.value("format", "") != "ssod-checkpoint") throw IoError(index_path.string() + ": not an SSOD checkpoint");
  ModelConfig cfg;
  cfg.widths = index.at("widths").get<std::vector<std::size_t>>();
  cfg.num_classes = index.at("num_classes").get<std::size_t>();
  cfg.kernel = index.at("kernel").get<std::size_t>();
  cfg.input_extent = index.at("input_extent").get<std::size_t>();
  BasicModel model(cfg, 0);
  const auto blob = index_path.parent_path() / index.at("tensors_file").get<std::string>();
  std::ifstream is(blob, std::ios::binary);
  if (!is) throw IoError("missing checkpoint tensors: " + blob.string());
  auto params = model.parameters();
  const auto& entries = index.at("parameters");
  if (entries.size() != params.size()) throw IoError(index_path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto rec = ssdt::read(is, blob.string());
    if (rec.shape != params[i].shape()) {
      throw IoError(blob.string() + ": parameter " + entries[i].at("name").get<std::string>() + " has shape " +
                    shape_str(rec.shape) + ", expected " + shape_str(params[i].shape()));
    }
    std::copy(rec.data.begin(), rec.data.end(), params[i].mutable_data().begin());
  }
  return model;
}

}  // namespace ssod
