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

#include <cmath>

#include "ssod/nets.hpp"
#include "ssod/objective.hpp"
#include "support/gradcheck.hpp"

namespace ssod {
namespace {

PatchLabelMap labels_from(std::initializer_list<PatchLabel> ls) {
  PatchLabelMap m;
  m.height = 1;
  m.width = ls.size();
  for (auto l : ls) {
    m.labels.push_back(l);
    if (l == PatchLabel::kId) ++m.id_count;
    else if (l == PatchLabel::kOod) ++m.ood_count;
    else ++m.na_count;
  }
  return m;
}

constexpr auto I = PatchLabel::kId;
constexpr auto O = PatchLabel::kOod;
constexpr auto N = PatchLabel::kNotApplicable;

// Direct per-image weighted BCE, independent of the tensor code.
double bce_ref(double z, int y) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return y ? -std::log(p) : -std::log(1 - p);
}

TEST(Labeling, ThreeWaySplit) {
  EXPECT_EQ(label_patch(0.97f, 0.95), I);
  EXPECT_EQ(label_patch(0.03f, 0.95), O);
  EXPECT_EQ(label_patch(0.50f, 0.95), N);
  EXPECT_EQ(label_patch(0.95f, 0.95), I);
  EXPECT_EQ(label_patch(0.05f, 0.95), N);
  EXPECT_EQ(label_patch(0.0499f, 0.95), O);
}

TEST(Labeling, GammaOneLeavesOnlyExtremes) {
  EXPECT_EQ(label_patch(1.0f, 1.0), I);
  EXPECT_EQ(label_patch(0.0f, 1.0), N);
  EXPECT_EQ(label_patch(0.999f, 1.0), N);
}

TEST(Labeling, GammaAtOrBelowHalfRejected) {
  const TargetConfidenceMap t{1, 1, {0.5f}};
  EXPECT_THROW(sample_patch_labels(t, 0.5), ConfigError);
  EXPECT_THROW(sample_patch_labels(t, 0.3), ConfigError);
  EXPECT_THROW(sample_patch_labels(t, 1.01), ConfigError);
  EXPECT_NO_THROW(sample_patch_labels(t, 0.51));
}

TEST(Labeling, CountsAndBatchSlices) {
  ConfidenceMap cm{2, 1, 3, {0.99f, 0.5f, 0.01f, 0.01f, 0.5f, 0.99f}};
  const std::vector<ConfidenceMap> maps{cm, cm};
  const std::vector<int> y{0, 1};
  const auto lb = label_batch(maps, y, 0.95);
  EXPECT_EQ(lb[0].labels, (std::vector<PatchLabel>{I, N, O}));
  EXPECT_EQ(lb[1].labels, (std::vector<PatchLabel>{O, N, I}));
  EXPECT_EQ(lb[0].id_count, 1u);
  EXPECT_EQ(lb[0].ood_count, 1u);
  EXPECT_EQ(lb[0].na_count, 1u);
}

TEST(OodLoss, ZeroLogitsGiveLnTwoUnderEveryScheme) {
  const std::vector<PatchLabelMap> lm{labels_from({I, I, O, N}), labels_from({O, O, O, I})};
  const Tensor z = Tensor::zeros({2, 1, 4});
  for (auto s : {BalanceScheme::kLW, BalanceScheme::kDR, BalanceScheme::kLWB}) {
    Rng rng(1);
    const auto r = ood_head_loss(z, lm, s, rng, 1.0);
    EXPECT_NEAR(r.loss.item(), std::log(2.0), 1e-6) << to_string(s);
    EXPECT_EQ(r.supervised_images, 2u);
  }
}

TEST(OodLoss, LwbHalvesMassPerSide) {
  // 15 ID patches and 1 OOD patch: the OOD patch carries half the weight.
  std::vector<PatchLabel> ls(15, I);
  ls.push_back(O);
  PatchLabelMap m;
  m.height = 4;
  m.width = 4;
  m.labels = ls;
  m.id_count = 15;
  m.ood_count = 1;
  std::vector<float> w(16);
  Rng rng(0);
  bool single = true;
  ASSERT_TRUE(scheme_weights(m, BalanceScheme::kLWB, 1.0, rng, w, single));
  EXPECT_FALSE(single);
  for (int i = 0; i < 15; ++i) EXPECT_FLOAT_EQ(w[static_cast<std::size_t>(i)], 1.0f / 30.0f);
  EXPECT_FLOAT_EQ(w[15], 0.5f);

  std::vector<float> logits(16);
  for (std::size_t i = 0; i < 16; ++i) logits[i] = 0.1f * static_cast<float>(i) - 0.7f;
  double ref = 0;
  for (std::size_t i = 0; i < 15; ++i) ref += bce_ref(logits[i], 1) / 30.0;
  ref += 0.5 * bce_ref(logits[15], 0);
  const std::vector<PatchLabelMap> lm{m};
  const auto r = ood_head_loss(Tensor({1, 4, 4}, logits), lm, BalanceScheme::kLWB, rng);
  EXPECT_NEAR(r.loss.item(), ref, 1e-6);
}

TEST(OodLoss, PerfectPredictionsNearZero) {
  const std::vector<PatchLabelMap> lm{labels_from({I, O, N, I})};
  const Tensor z({1, 4}, {30.0f, -30.0f, 5.0f, 30.0f});
  for (auto s : {BalanceScheme::kLW, BalanceScheme::kDR, BalanceScheme::kLWB}) {
    Rng rng(2);
    EXPECT_LT(ood_head_loss(z, lm, s, rng).loss.item(), 1e-10f);
  }
}

TEST(OodLoss, SchemesAgreeOnBalancedImages) {
  const std::vector<PatchLabelMap> lm{labels_from({I, O, I, O, N}), labels_from({O, I, N, N, N})};
  const Tensor z({2, 5}, {0.3f, -1.2f, 2.0f, 0.4f, 9.0f, -0.5f, 1.1f, -3.0f, 3.0f, 0.0f});
  Rng r1(3), r2(3), r3(3);
  const float lw = ood_head_loss(z, lm, BalanceScheme::kLW, r1, 1.0).loss.item();
  const float dr = ood_head_loss(z, lm, BalanceScheme::kDR, r2).loss.item();
  const float lwb = ood_head_loss(z, lm, BalanceScheme::kLWB, r3).loss.item();
  EXPECT_NEAR(lw, lwb, 1e-6);
  EXPECT_NEAR(dr, lwb, 1e-6);
}

TEST(OodLoss, LwMatchesHandComputation) {
  const std::vector<PatchLabelMap> lm{labels_from({I, O, O, N})};
  const std::vector<float> zv{0.5f, -0.2f, 1.0f, 4.0f};
  Rng rng(0);
  const double lw = 0.7;
  const double ref = (bce_ref(0.5, 1) + lw * bce_ref(-0.2, 0) + lw * bce_ref(1.0, 0)) / 3.0;
  EXPECT_NEAR(ood_head_loss(Tensor({1, 4}, zv), lm, BalanceScheme::kLW, rng, lw).loss.item(), ref, 1e-6);
  // Default factor is #ID / #OOD = 0.5.
  const double ref_default = (bce_ref(0.5, 1) + 0.5 * bce_ref(-0.2, 0) + 0.5 * bce_ref(1.0, 0)) / 3.0;
  EXPECT_NEAR(ood_head_loss(Tensor({1, 4}, zv), lm, BalanceScheme::kLW, rng).loss.item(), ref_default, 1e-6);
  EXPECT_THROW(ood_head_loss(Tensor({1, 4}, zv), lm, BalanceScheme::kLW, rng, 0.0), ConfigError);
}

TEST(OodLoss, DrSubsetIsSeededAndBalanced) {
  const std::vector<PatchLabelMap> lm{labels_from({I, I, I, I, O, N, I, I})};
  std::vector<float> zv{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f};
  const Tensor z({1, 8}, zv);
  Rng a(11), b(11);
  EXPECT_EQ(ood_head_loss(z, lm, BalanceScheme::kDR, a).loss.item(), ood_head_loss(z, lm, BalanceScheme::kDR, b).loss.item());
  // One OOD patch, so exactly one ID patch joins it with weight 1/2 each.
  std::vector<float> w(8);
  bool single = false;
  Rng c(5);
  ASSERT_TRUE(scheme_weights(lm[0], BalanceScheme::kDR, 1.0, c, w, single));
  int nonzero_id = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    if (lm[0].labels[i] == I && w[i] > 0) {
      ++nonzero_id;
      EXPECT_FLOAT_EQ(w[i], 0.5f);
    }
  }
  EXPECT_EQ(nonzero_id, 1);
  EXPECT_FLOAT_EQ(w[4], 0.5f);
  EXPECT_EQ(w[5], 0.0f);
}

TEST(OodLoss, UnsupervisedImagesContributeNothing) {
  const std::vector<PatchLabelMap> lm{labels_from({N, N}), labels_from({I, I})};
  const Tensor z({2, 2}, {5.0f, -5.0f, 0.0f, 0.0f}, true);
  Rng rng(0);
  const auto dr = ood_head_loss(z, lm, BalanceScheme::kDR, rng);
  EXPECT_FALSE(dr.supervised);
  EXPECT_EQ(dr.loss.item(), 0.0f);
  const auto lwb = ood_head_loss(z, lm, BalanceScheme::kLWB, rng);
  EXPECT_EQ(lwb.supervised_images, 1u);
  EXPECT_EQ(lwb.single_class_images, 1u);
  EXPECT_NEAR(lwb.loss.item(), std::log(2.0), 1e-6);
}

TEST(OodLoss, NotApplicableLogitsAreIgnored) {
  const std::vector<PatchLabelMap> lm{labels_from({I, N, O, N})};
  Rng a(0), b(0);
  const Tensor z1({1, 4}, {0.4f, 7.0f, -0.3f, -2.0f}, true);
  const Tensor z2({1, 4}, {0.4f, -9.0f, -0.3f, 3.0f});
  const auto r1 = ood_head_loss(z1, lm, BalanceScheme::kLWB, a);
  EXPECT_FLOAT_EQ(r1.loss.item(), ood_head_loss(z2, lm, BalanceScheme::kLWB, b).loss.item());
  backward(r1.loss);
  EXPECT_EQ(z1.grad()[1], 0.0f);
  EXPECT_EQ(z1.grad()[3], 0.0f);
  EXPECT_NE(z1.grad()[0], 0.0f);
}

TEST(OodLoss, ShapeMismatchRejected) {
  const std::vector<PatchLabelMap> lm{labels_from({I, O})};
  Rng rng(0);
  EXPECT_THROW(ood_head_loss(Tensor::zeros({1, 3}), lm, BalanceScheme::kLWB, rng), ConfigError);
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_NEAR(total_loss(Tensor::scalar(1.0f), Tensor::scalar(0.5f), 1.2).item(), 1.6f, 1e-6);
  EXPECT_NEAR(total_loss(Tensor::scalar(1.0f), Tensor::scalar(0.5f), 0.0).item(), 1.0f, 1e-7);
  EXPECT_THROW(total_loss(Tensor::scalar(1.0f), Tensor::scalar(0.5f), -0.1), ConfigError);
}

TEST(Schemes, ParseAndPrint) {
  for (auto s : {BalanceScheme::kLW, BalanceScheme::kDR, BalanceScheme::kLWB}) EXPECT_EQ(parse_scheme(to_string(s)), s);
  EXPECT_THROW(parse_scheme("XYZ"), ConfigError);
}

// Full objective through a tiny model, audited in double. Labels are fixed
// from the starting point so the loss is smooth in the parameters.
TEST(GradCheck, FullObjectiveThroughModel) {
  ModelConfig cfg;
  cfg.widths = {3, 4, 5};
  cfg.num_classes = 3;
  SsodModelD model(cfg, 17);
  for (auto& w : model.ood_weight().mutable_data()) w = 0.2;
  Rng rng(4);
  const auto images = testing::random_tensor({3, 3, 8, 8}, rng, 0, 1, false);
  const std::vector<int> y{0, 1, 2};
  std::vector<PatchLabelMap> labels;
  for (int b = 0; b < 3; ++b) {
    PatchLabelMap m{2, 2, {I, O, b == 0 ? N : I, O}, 0, 0, 0};
    for (auto l : m.labels) (l == I ? m.id_count : l == O ? m.ood_count : m.na_count)++;
    labels.push_back(m);
  }
  for (auto scheme : {BalanceScheme::kLWB, BalanceScheme::kLW}) {
    auto loss_fn = [&] {
      const TensorD fm = model.forward_features(images);
      Rng sampler(9);
      const auto ood = ood_head_loss(model.ood_patch_logits(fm), labels, scheme, sampler);
      return total_loss(softmax_ce(model.pooled_logits(fm), y), ood.loss, 1.3);
    };
    const auto r = testing::check_gradients(loss_fn, model.parameters(), {}, std::string(to_string(scheme)));
    EXPECT_GE(r.checked, 50u);
    EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
  }
}

}  // namespace
}  // namespace ssod
