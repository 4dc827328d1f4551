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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ssod/nets.hpp"
#include "ssod/objective.hpp"

namespace ssod {
namespace {

ModelConfig small(std::size_t blocks, std::size_t classes = 4, std::size_t c = 6) {
  ModelConfig m;
  m.widths = {3};
  for (std::size_t b = 0; b < blocks; ++b) m.widths.push_back(c);
  m.num_classes = classes;
  return m;
}

Tensor random_images(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n * 3 * h * w);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor({n, 3, h, w}, std::move(v));
}

Tensor random_fm(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n * c * h * w);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return Tensor({n, c, h, w}, std::move(v));
}

TEST(Backbone, SpatialExtents) {
  const SsodModel m3(small(3), 1);
  const Tensor fm = m3.forward_features(random_images(2, 32, 32, 1));
  EXPECT_EQ(fm.shape(), (Shape{2, 6, 4, 4}));
  const Tensor tall = m3.forward_features(random_images(1, 64, 32, 2));
  EXPECT_EQ(tall.dim(2), 8u);
  EXPECT_EQ(tall.dim(3), 4u);
  const SsodModel m5(small(5, 4, 2), 1);
  EXPECT_EQ(m5.forward_features(random_images(1, 224, 224, 3)).shape(), (Shape{1, 2, 7, 7}));
}

TEST(Backbone, DefaultGeometryGivesSixteenPatches) {
  const SsodModel m(ModelConfig{}, 0);
  EXPECT_EQ(m.config().downsampling(), 16u);
  EXPECT_EQ(m.forward_features(random_images(1, 64, 64, 4)).shape(), (Shape{1, 128, 4, 4}));
}

TEST(Backbone, IndivisibleExtentSuggestsPadding) {
  const SsodModel m(small(3), 1);
  try {
    m.forward_features(random_images(1, 30, 32, 5));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pad by 2 pixels"), std::string::npos) << e.what();
  }
}

TEST(Heads, ZeroClassifierIsUniform) {
  SsodModel m(small(2), 7);
  for (auto* t : {&m.cls_weight(), &m.cls_bias()}) {
    for (auto& v : t->mutable_data()) v = 0.0f;
  }
  const auto p = classify_pooled(m, random_fm(3, 6, 4, 4, 1));
  for (float v : p) EXPECT_NEAR(v, 0.25f, 1e-7);
}

TEST(Heads, ChannelMismatchRejected) {
  const SsodModel m(small(2), 7);
  EXPECT_THROW(classify_pooled(m, random_fm(1, 5, 4, 4, 1)), ConfigError);
  EXPECT_THROW(m.ood_patch_logits(random_fm(1, 5, 4, 4, 1)), ConfigError);
}

TEST(Heads, ConstantMapMatchesPooled) {
  const SsodModel m(small(2), 3);
  std::vector<float> v;
  const std::vector<float> col{0.3f, -0.2f, 0.9f, 0.0f, 1.5f, -0.7f};
  for (float c : col) v.insert(v.end(), 9, c);
  const Tensor fm({1, 6, 3, 3}, v);
  const auto pooled = classify_pooled(m, fm);
  const auto cm = patch_confidence_map(m, fm)[0];
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t y = 0; y < 3; ++y) {
      for (std::size_t x = 0; x < 3; ++x) EXPECT_NEAR(cm.at(k, y, x), pooled[k], 1e-6);
    }
  }
  const Tensor z = m.ood_patch_logits(fm);
  for (float l : z.data()) EXPECT_NEAR(l, z.data()[0], 1e-7);
}

TEST(Heads, ConfidenceMapNormalizedAndSlicesSumToOne) {
  const SsodModel m(small(2), 3);
  const auto maps = patch_confidence_map(m, random_fm(2, 6, 4, 5, 9));
  ASSERT_EQ(maps.size(), 2u);
  for (const auto& cm : maps) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 5; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) {
          EXPECT_GE(cm.at(k, y, x), 0.0f);
          s += cm.at(k, y, x);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
    std::vector<double> total(20, 0.0);
    for (int k = 0; k < 4; ++k) {
      const auto t = target_slice(cm, k);
      for (std::size_t i = 0; i < 20; ++i) total[i] += t.values[i];
    }
    for (double s : total) EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Heads, SpatialPermutationEquivariance) {
  const SsodModel m(small(2), 11);
  const Tensor fm = random_fm(1, 6, 2, 3, 4);
  // Swap locations (0,0) and (1,2).
  std::vector<float> v(fm.data().begin(), fm.data().end());
  for (std::size_t c = 0; c < 6; ++c) std::swap(v[c * 6 + 0], v[c * 6 + 5]);
  const Tensor swapped({1, 6, 2, 3}, v);
  const auto a = patch_confidence_map(m, fm)[0], b = patch_confidence_map(m, swapped)[0];
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_FLOAT_EQ(a.at(k, 0, 0), b.at(k, 1, 2));
    EXPECT_FLOAT_EQ(a.at(k, 1, 2), b.at(k, 0, 0));
    EXPECT_FLOAT_EQ(a.at(k, 0, 1), b.at(k, 0, 1));
  }
  SsodModel mo = m.clone();
  for (auto& w : mo.ood_weight().mutable_data()) w = 0.1f;
  const Tensor za = mo.ood_patch_logits(fm), zb = mo.ood_patch_logits(swapped);
  EXPECT_FLOAT_EQ(za.data()[0], zb.data()[5]);
  EXPECT_FLOAT_EQ(za.data()[5], zb.data()[0]);
}

TEST(Heads, TargetSliceIndexing) {
  ConfidenceMap cm{2, 1, 1, {0.7f, 0.3f}};
  EXPECT_FLOAT_EQ(target_slice(cm, 0).values[0], 0.7f);
  EXPECT_FLOAT_EQ(target_slice(cm, 1).values[0], 0.3f);
  EXPECT_THROW(target_slice(cm, 2), ConfigError);
  EXPECT_THROW(target_slice(cm, -1), ConfigError);
}

TEST(OodFactor, ZeroHeadIsOneHalfAndMonotone) {
  SsodModel m(small(2), 5);
  const Tensor fm = random_fm(3, 6, 4, 4, 2);
  for (float f : ood_factor(m, fm)) EXPECT_EQ(f, 0.5f);
  const Tensor z0 = m.ood_patch_logits(fm);
  for (float z : z0.data()) EXPECT_EQ(z, 0.0f);
  // Push the pooled feature along w: the factor must strictly increase.
  auto w = m.ood_weight().mutable_data();
  for (std::size_t c = 0; c < w.size(); ++c) w[c] = static_cast<float>(c % 2 ? 0.5 : -0.25);
  float prev = -1.0f;
  for (int step = 0; step < 5; ++step) {
    std::vector<float> v(6 * 4);
    for (std::size_t c = 0; c < 6; ++c) {
      for (std::size_t p = 0; p < 4; ++p) v[c * 4 + p] = static_cast<float>(step) * w[c];
    }
    const float f = ood_factor(m, Tensor({1, 6, 2, 2}, v))[0];
    EXPECT_GT(f, prev);
    EXPECT_GT(f, 0.0f);
    EXPECT_LT(f, 1.0f);
    prev = f;
  }
}

TEST(JointPosterior, Arithmetic) {
  const std::vector<float> uniform(4, 0.25f), half{0.5f};
  const auto jp = combine_posterior(uniform, half, 4);
  for (float p : jp.class_probs) EXPECT_FLOAT_EQ(p, 0.125f);
  EXPECT_FLOAT_EQ(jp.ood_mass[0], 0.5f);
  const std::vector<float> probs{0.1f, 0.6f, 0.3f}, one{1.0f};
  const auto id = combine_posterior(probs, one, 3);
  EXPECT_EQ(id.class_probs, probs);
  EXPECT_EQ(id.ood_mass[0], 0.0f);
}

TEST(JointPosterior, SumsToOneAndKeepsArgmax) {
  SsodModel m(small(3), 8);
  for (auto& w : m.ood_weight().mutable_data()) w = 0.3f;
  const Tensor images = random_images(5, 32, 32, 6);
  const auto jp = joint_posterior(m, images);
  const auto fm = m.forward_features(images);
  const auto pooled = classify_pooled(m, fm);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = jp.ood_mass[i];
    for (std::size_t k = 0; k < 4; ++k) s += jp.class_probs[i * 4 + k];
    EXPECT_NEAR(s, 1.0, 1e-6);
    auto arg = [&](const std::vector<float>& v) {
      return std::max_element(v.begin() + static_cast<long>(i * 4), v.begin() + static_cast<long>(i * 4 + 4)) - v.begin();
    };
    EXPECT_EQ(arg(jp.class_probs), arg(pooled));
  }
}

TEST(Training, OodLossChangesBackboneGradients) {
  SsodModel m(small(2), 12);
  for (auto& w : m.ood_weight().mutable_data()) w = 0.2f;
  const Tensor x = random_images(4, 16, 16, 13);
  const std::vector<int> y{0, 1, 2, 3};
  auto grads = [&](double alpha) {
    m.zero_grad();
    const Tensor fm = m.forward_features(x);
    Tensor loss = softmax_ce(m.pooled_logits(fm), y);
    if (alpha > 0) {
      std::vector<PatchLabelMap> labels(4);
      for (auto& l : labels) {
        l.height = l.width = 4;
        for (int p = 0; p < 16; ++p) l.labels.push_back(p % 3 ? PatchLabel::kOod : PatchLabel::kId);
        l.id_count = 6;
        l.ood_count = 10;
      }
      Rng rng(0);
      loss = total_loss(loss, ood_head_loss(m.ood_patch_logits(fm), labels, BalanceScheme::kLWB, rng).loss, alpha);
    }
    backward(loss);
    return m.conv_weight(0).grad();
  };
  const auto g0 = grads(0.0), g1 = grads(1.0);
  double diff = 0;
  for (std::size_t i = 0; i < g0.size(); ++i) diff += std::abs(g0[i] - g1[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Checkpoint, RoundTripIsBitExactWithRoles) {
  const auto dir = std::filesystem::temp_directory_path() / "ssod_nets_test";
  std::filesystem::create_directories(dir);
  SsodModel m(small(3), 21);
  for (auto& w : m.ood_weight().mutable_data()) w = -0.125f;
  m.save(dir / "ck.json");
  const SsodModel back = SsodModel::load(dir / "ck.json");
  const auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].shape(), b[i].shape());
    for (std::size_t j = 0; j < a[i].size(); ++j) EXPECT_EQ(a[i].data()[j], b[i].data()[j]);
  }
  std::ifstream is(dir / "ck.json");
  nlohmann::json j;
  is >> j;
  EXPECT_EQ(j["num_classes"], 4);
  EXPECT_EQ(j["feature_channels"], 6);
  EXPECT_EQ(j["parameters"][0]["role"], "conv-weight");
  EXPECT_EQ(j["parameters"][0]["block"], 0);
  EXPECT_EQ(j["parameters"].back()["role"], "ood-bias");
  std::filesystem::remove(dir / "ck.ssdt");
  EXPECT_THROW(SsodModel::load(dir / "ck.json"), IoError);
}

TEST(Checkpoint, CloneIsDeep) {
  SsodModel m(small(2), 1);
  SsodModel c = m.clone();
  c.cls_bias().mutable_data()[0] += 1.0f;
  EXPECT_NE(c.cls_bias().data()[0], m.cls_bias().data()[0]);
}

}  // namespace
}  // namespace ssod
