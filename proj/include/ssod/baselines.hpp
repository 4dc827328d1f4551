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

// Post-hoc OOD scorers on logits or pooled backbone features.
// All return "higher = more in-distribution".

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssod/error.hpp"
#include "ssod/ssdt.hpp"

namespace ssod {

/// Maximum softmax probability.
inline double msp_score(std::span<const float> logits) {
  if (logits.empty()) throw ConfigError("msp_score: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (float z : logits) denom += std::exp(z - mx);
  return 1.0 / denom;
}

/// Negative free energy T * log sum exp(z / T).
inline double energy_score(std::span<const float> logits, double temperature = 1.0) {
  if (logits.empty()) throw ConfigError("energy_score: empty logits");
  if (!(temperature > 0.0)) throw ConfigError("energy_score: temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (float z : logits) mx = std::max(mx, z / temperature);
  double acc = 0.0;
  for (float z : logits) acc += std::exp(z / temperature - mx);
  return temperature * (mx + std::log(acc));
}

inline double maxlogit_score(std::span<const float> logits) {
  if (logits.empty()) throw ConfigError("maxlogit_score: empty logits");
  return *std::max_element(logits.begin(), logits.end());
}

/// Elementwise min(x, c).
inline std::vector<float> react_clip(std::span<const float> features, double threshold) {
  std::vector<float> out(features.begin(), features.end());
  for (auto& v : out) v = static_cast<float>(std::min<double>(v, threshold));
  return out;
}

/// Linear-interpolated percentile (q in [0,100]) of a sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ConfigError("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Pooled training features with the statistics the feature-space scorers need.
class FeatureBank {
 public:
  using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  FeatureBank() = default;

  /// `features` is row-major [N, C]. ridge < 0 selects 1e-6 * trace(cov) / C.
  static FeatureBank fit(std::span<const float> features, std::span<const int> labels, std::size_t num_classes,
                         double ridge = -1.0, double react_percentile = 90.0) {
    const std::size_t n = labels.size();
    if (n == 0) throw ConfigError("FeatureBank: empty bank");
    if (features.size() % n != 0) throw ConfigError("FeatureBank: feature matrix does not match label count");
    FeatureBank bank;
    bank.num_classes_ = num_classes;
    bank.dim_ = features.size() / n;
    bank.features_.assign(features.begin(), features.end());
    bank.labels_.assign(labels.begin(), labels.end());
    const std::size_t c = bank.dim_;

    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ConfigError("FeatureBank: label out of range");
      ++counts[static_cast<std::size_t>(y)];
    }
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (counts[k] < 2) {
        throw ConfigError("FeatureBank: class " + std::to_string(k) + " has " + std::to_string(counts[k]) +
                          " samples; at least 2 are required");
      }
    }

    bank.means_ = MatrixD::Zero(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(c));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) bank.means_(labels[i], static_cast<Eigen::Index>(j)) += features[i * c + j];
    }
    for (std::size_t k = 0; k < num_classes; ++k) bank.means_.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(counts[k]);

    // Shared covariance of class-centered features.
    MatrixD centered(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            features[i * c + j] - bank.means_(labels[i], static_cast<Eigen::Index>(j));
      }
    }
    bank.cov_ = (centered.transpose() * centered) / static_cast<double>(n);
    bank.cov_ = (bank.cov_ + bank.cov_.transpose()) / 2.0;
    bank.ridge_ = ridge >= 0.0 ? ridge : 1e-6 * bank.cov_.trace() / static_cast<double>(c);
    MatrixD reg = bank.cov_;
    reg.diagonal().array() += bank.ridge_;
    Eigen::LLT<MatrixD> llt(reg);
    if (llt.info() != Eigen::Success) {
      throw ConfigError("FeatureBank: covariance is singular; fit with a positive ridge (e.g. 1e-6 * trace / C)");
    }
    bank.precision_ = llt.solve(MatrixD::Identity(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c)));

    bank.normalized_.resize(features.size());
    for (std::size_t i = 0; i < n; ++i) normalize_into(features.subspan(i * c, c), &bank.normalized_[i * c]);

    std::vector<double> acts(features.begin(), features.end());
    bank.react_percentile_ = react_percentile;
    bank.react_threshold_ = percentile(std::move(acts), react_percentile);
    return bank;
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t num_classes() const { return num_classes_; }
  double ridge() const { return ridge_; }
  double react_threshold() const { return react_threshold_; }
  const MatrixD& means() const { return means_; }
  const MatrixD& covariance() const { return cov_; }
  const MatrixD& precision() const { return precision_; }
  std::span<const float> features() const { return features_; }
  std::span<const int> labels() const { return labels_; }
  std::span<const float> normalized_row(std::size_t i) const {
    return std::span<const float>(normalized_).subspan(i * dim_, dim_);
  }

  /// -min_k (f - mu_k)^T Sigma^-1 (f - mu_k).
  double mahalanobis_score(std::span<const float> feature) const {
    check_dim(feature.size());
    Eigen::VectorXd f(static_cast<Eigen::Index>(dim_));
    for (std::size_t j = 0; j < dim_; ++j) f(static_cast<Eigen::Index>(j)) = feature[j];
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < num_classes_; ++k) {
      const Eigen::VectorXd d = f - means_.row(static_cast<Eigen::Index>(k)).transpose();
      best = std::min(best, d.dot(precision_ * d));
    }
    return -best;
  }

  /// Negative distance from the unit-normalized query to its k-th nearest
  /// unit-normalized bank row.
  double knn_score(std::span<const float> feature, std::size_t k) const {
    if (labels_.empty()) throw ConfigError("knn_score: empty bank");
    if (k < 1 || k > size()) {
      throw ConfigError("knn_score: k=" + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
    }
    check_dim(feature.size());
    std::vector<float> q(dim_);
    normalize_into(feature, q.data());
    std::vector<double> d(size());
    for (std::size_t i = 0; i < size(); ++i) d[i] = distance(q, normalized_row(i));
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    return -d[k - 1];
  }

  /// Euclidean distance accumulated in double in index order.
  static double distance(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double t = static_cast<double>(a[j]) - b[j];
      acc += t * t;
    }
    return std::sqrt(acc);
  }

  static void normalize_into(std::span<const float> v, float* out) {
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < v.size(); ++j) out[j] = norm > 0.0 ? static_cast<float>(v[j] / norm) : 0.0f;
  }

  /// Writes `<stem>.json` metadata and `<stem>.ssdt` (features, labels,
  /// means, covariance).
  void save(const std::filesystem::path& index_path) const {
    std::filesystem::path blob = index_path;
    blob.replace_extension(".ssdt");
    std::ofstream os(blob, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + blob.string() + " for writing");
    ssdt::write(os, {size(), dim_}, features_);
    std::vector<float> lab(labels_.begin(), labels_.end());
    ssdt::write(os, {size()}, lab);
    std::vector<float> mu(means_.data(), means_.data() + means_.size());
    ssdt::write(os, {num_classes_, dim_}, mu);
    std::vector<float> cov(cov_.data(), cov_.data() + cov_.size());
    ssdt::write(os, {dim_, dim_}, cov);
    os.close();
    nlohmann::json j;
    j["format"] = "ssod-feature-bank";
    j["version"] = 1;
    j["tensors_file"] = blob.filename().string();
    j["num_classes"] = num_classes_;
    j["feature_dim"] = dim_;
    j["size"] = size();
    j["ridge"] = ridge_;
    j["normalized"] = true;
    j["react_percentile"] = react_percentile_;
    j["react_threshold"] = react_threshold_;
    std::ofstream js(index_path, std::ios::trunc);
    if (!js) throw IoError("cannot open " + index_path.string() + " for writing");
    js << j.dump(2) << '\n';
  }

  /// Refits from the stored features with the stored ridge.
  static FeatureBank load(const std::filesystem::path& index_path) {
    std::ifstream js(index_path);
    if (!js) throw IoError("missing feature bank: " + index_path.string() + " (run fit-bank first)");
    nlohmann::json j;
    try {
      js >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(index_path.string() + ": malformed feature bank index: " + e.what());
    }
    if (j.value("format", "") != "ssod-feature-bank") throw IoError(index_path.string() + ": not a feature bank");
    const auto blob = index_path.parent_path() / j.at("tensors_file").get<std::string>();
    std::ifstream is(blob, std::ios::binary);
    if (!is) throw IoError("missing feature bank tensors: " + blob.string());
    auto feats = ssdt::read(is, blob.string());
    auto labs = ssdt::read(is, blob.string());
    std::vector<int> labels(labs.data.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(labs.data[i]);
    return fit(feats.data, labels, j.at("num_classes").get<std::size_t>(), j.at("ridge").get<double>(),
               j.value("react_percentile", 90.0));
  }

 private:
  void check_dim(std::size_t d) const {
    if (d != dim_) {
      throw ConfigError("feature of dimension " + std::to_string(d) + " does not match bank dimension " +
                        std::to_string(dim_));
    }
  }

  std::size_t num_classes_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> features_;
  std::vector<int> labels_;
  std::vector<float> normalized_;
  MatrixD means_, cov_, precision_;
  double ridge_ = 0.0;
  double react_percentile_ = 90.0;
  double react_threshold_ = 0.0;
};

}  // namespace ssod
