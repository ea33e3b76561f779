// Copyright 2026 The bpfsim Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "bpf/detector.hpp"

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "bpf/error.hpp"
#include "test_support.hpp"

namespace bpf {
namespace {

using testing::make_rng;
using testing::rel_error;

Scene noiseless_scene(const std::vector<std::pair<BBox, int>>& objects, int h = 24, int w = 24,
                      int channels = 4, std::uint64_t seed = 1) {
  const auto protos = make_prototypes(4, channels, seed);
  Scene s;
  s.features = FeatureGrid(h, w, channels);
  for (const auto& [box, cls] : objects) {
    s.objects.push_back({box, cls});
    const CellRange r = cells_in(box, h, w);
    for (int row = r.row_begin; row < r.row_end; ++row) {
      for (int col = r.col_begin; col < r.col_end; ++col) {
        for (int ch = 0; ch < channels; ++ch) s.features.at(row, col, ch) += protos[cls][ch];
      }
    }
  }
  return s;
}

TEST(Softmax, NormalizedAndStable) {
  const std::vector<double> z{kLogitClip, kLogitClip - 1.0, -kLogitClip};
  const ProbVector p = softmax(z);
  EXPECT_TRUE(p.normalized());
  EXPECT_NEAR(p[0] / p[1], std::exp(1.0), 1e-9);
  const ProbVector clipped = softmax(std::vector<double>{1000.0, 999.0, -1000.0});
  EXPECT_TRUE(clipped.normalized());
  EXPECT_EQ(clipped[0], clipped[1]);
}

TEST(BoxDelta, EncodeApplyRoundTrip) {
  auto rng = make_rng(1);
  for (int i = 0; i < 1000; ++i) {
    const BBox a = testing::real_box(rng, 30.0, 1.0), b = testing::real_box(rng, 30.0, 1.0);
    const BBox back = apply_delta(a, encode_delta(a, b));
    ASSERT_NEAR(back.x_min, b.x_min, 1e-9);
    ASSERT_NEAR(back.y_min, b.y_min, 1e-9);
    ASSERT_NEAR(back.x_max, b.x_max, 1e-9);
    ASSERT_NEAR(back.y_max, b.y_max, 1e-9);
  }
}

TEST(BoxDelta, DegenerateBoxThrows) {
  EXPECT_THROW(encode_delta({0, 0, 0, 2}, {0, 0, 1, 1}), Error);
}

TEST(ClampTo, StaysInsideExtent) {
  const BBox c = clamp_to({-2, 3, 40, 50}, {0, 0, 32, 32});
  EXPECT_EQ(c, (BBox{0, 3, 32, 32}));
}

TEST(CandidateBoxes, EnumeratesWindowsInsideExtent) {
  ProposalConfig cfg;
  cfg.window_sizes = {4, 6};
  cfg.stride = 2;
  const auto c = candidate_boxes(cfg, 10, 8);
  // Per (h, w): rows * cols positions.
  const std::size_t expect = 4 * 3 + 4 * 2 + 3 * 3 + 3 * 2;
  EXPECT_EQ(c.size(), expect);
  for (const auto& b : c) {
    EXPECT_GE(b.x_min, 0.0);
    EXPECT_LE(b.x_max, 8.0);
    EXPECT_LE(b.y_max, 10.0);
  }
  cfg.stride = 0;
  EXPECT_THROW(candidate_boxes(cfg, 10, 8), ConfigError);
}

TEST(RoiFeature, NoiselessObjectBoxGivesPrototypeAndBias) {
  const BBox box{4, 5, 12, 11};
  const Scene s = noiseless_scene({{box, 2}});
  const auto f = roi_feature(s, box);
  const auto protos = make_prototypes(4, 4, 1);
  ASSERT_EQ(static_cast<int>(f.size()), roi_feature_dim(4));
  for (int ch = 0; ch < 4; ++ch) EXPECT_NEAR(f[ch], protos[2][ch], 1e-12);
  // The ring around an isolated object is empty.
  for (int ch = 0; ch < 4; ++ch) EXPECT_NEAR(f[4 + ch], 0.0, 1e-12);
  EXPECT_EQ(f.back(), 1.0);
}

TEST(RoiFeature, MatchesDirectAveraging) {
  auto rng = make_rng(2);
  Scene s;
  s.features = FeatureGrid(16, 16, 3);
  for (double& v : s.features.data) v = testing::uniform(rng, -1, 1);
  const BBox box{3, 2, 9, 10};
  const auto f = roi_feature(s, box, 2.0);
  for (int ch = 0; ch < 3; ++ch) {
    double in = 0, ring = 0;
    int n_in = 0, n_ring = 0;
    for (int r = 0; r < 16; ++r) {
      for (int c = 0; c < 16; ++c) {
        const bool inside = c >= 3 && c < 9 && r >= 2 && r < 10;
        const bool grown = c >= 1 && c < 11 && r >= 0 && r < 12;
        if (inside) {
          in += s.features.at(r, c, ch);
          ++n_in;
        } else if (grown) {
          ring += s.features.at(r, c, ch);
          ++n_ring;
        }
      }
    }
    EXPECT_NEAR(f[ch], in / n_in, 1e-12);
    EXPECT_NEAR(f[3 + ch], ring / n_ring, 1e-12);
  }
}

TEST(RoiFeature, EmptyRegionThrows) {
  Scene s;
  s.features = FeatureGrid(8, 8, 2);
  EXPECT_THROW(roi_feature(s, {2.6, 2.6, 3.4, 3.4}), Error);
}

TEST(CandidateFeatures, RowsMatchPooler) {
  auto rng = make_rng(3);
  Scene s;
  s.features = FeatureGrid(16, 16, 3);
  for (double& v : s.features.data) v = testing::uniform(rng, -1, 1);
  ProposalConfig pc;
  pc.window_sizes = {4, 6};
  const auto cands = candidate_boxes(pc, 16, 16);
  const RoiPooler pooler(s.features, pc.ring_width);
  const CandidateFeatures cf(pooler, cands);
  ASSERT_EQ(cf.size(), cands.size());
  for (std::size_t i = 0; i < cands.size(); i += 7) {
    const auto direct = pooler.feature(cands[i]);
    const auto row = cf[i];
    ASSERT_TRUE(std::equal(direct.begin(), direct.end(), row.begin()));
  }
}

DetectorModel random_model(Rng& rng, int k, int dim) {
  const auto reg = ClassRegistry::from_split(std::to_string(k));
  std::vector<int> classes(k);
  std::iota(classes.begin(), classes.end(), 0);
  DetectorModel m = DetectorModel::zeros(reg, classes, dim);
  m.cls = testing::random_matrix(rng, k + 1, dim, 0.5);
  m.reg = testing::random_matrix(rng, 4 * k, dim, 0.3);
  m.obj = testing::random_vector(rng, dim, 0.5);
  return m;
}

TEST(Propose, LimitedRankingIsPrefixOfFullRanking) {
  auto rng = make_rng(4);
  Scene s;
  s.features = FeatureGrid(20, 20, 3);
  for (double& v : s.features.data) v = testing::uniform(rng, -1, 1);
  DetectorModel m = random_model(rng, 2, roi_feature_dim(3));
  m.proposals.window_sizes = {4, 6, 8};
  const auto cands = candidate_boxes(m.proposals, 20, 20);
  const RoiPooler pooler(s.features, m.proposals.ring_width);
  const CandidateFeatures cf(pooler, cands);
  const auto full = propose(m, cf);
  ASSERT_EQ(full.size(), cands.size());
  for (std::size_t i = 1; i < full.size(); ++i) {
    ASSERT_TRUE(full[i - 1].objectness > full[i].objectness ||
                (full[i - 1].objectness == full[i].objectness && full[i - 1].index < full[i].index));
  }
  const auto top = propose(m, cf, 25);
  ASSERT_EQ(top.size(), 25u);
  for (std::size_t i = 0; i < top.size(); ++i) {
    EXPECT_EQ(top[i].index, full[i].index);
    EXPECT_EQ(top[i].objectness, full[i].objectness);
  }
  const auto via_scene = propose(m, s);
  EXPECT_EQ(via_scene.front().index, full.front().index);
}

TEST(Model, ClassifyAndRegressShapes) {
  auto rng = make_rng(5);
  const DetectorModel m = random_model(rng, 3, 6);
  const auto feat = testing::random_vector(rng, 6);
  EXPECT_EQ(classify(m, feat).size(), 4u);
  EXPECT_TRUE(classify(m, feat).normalized());
  EXPECT_THROW(regress(m, feat, 7), Error);
  const std::vector<double> short_feat(5, 0.0);
  EXPECT_THROW(classify(m, short_feat), Error);
}

TEST(Model, JsonRoundTripIsExact) {
  auto rng = make_rng(6);
  DetectorModel m = random_model(rng, 3, 8);
  m.trained_through_stage = 1;
  const nlohmann::json j = m;
  const DetectorModel back = j.get<DetectorModel>();
  EXPECT_EQ(back, m);
  nlohmann::json broken = j;
  broken["w_obj"] = std::vector<double>(3, 0.0);
  EXPECT_THROW(broken.get<DetectorModel>(), Error);
}

// Loss as a function of the model, for finite differences.
double total_loss(const DetectorModel& m, const std::vector<RoiSample>& rois,
                  const std::vector<ObjectnessSample>& obj, double beta) {
  return loss_and_grads(m, rois, obj, beta, nullptr).total();
}

TEST(LossAndGrads, MatchesCentralDifferences) {
  auto rng = make_rng(7);
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const int k = testing::uniform_int(rng, 1, 3), dim = testing::uniform_int(rng, 2, 5);
    DetectorModel m = random_model(rng, k, dim);
    std::vector<RoiSample> rois;
    for (int i = 0; i < 5; ++i) {
      RoiSample s;
      s.feat = testing::random_vector(rng, dim);
      s.target = testing::uniform_int(rng, 0, k);
      s.weight = testing::uniform(rng, 0.2, 1.0);
      if (s.target < k) {
        s.box_target = BoxDelta{testing::uniform(rng, -0.5, 0.5), testing::uniform(rng, -0.5, 0.5),
                                testing::uniform(rng, -0.5, 0.5), testing::uniform(rng, -0.5, 0.5)};
      }
      rois.push_back(std::move(s));
    }
    std::vector<ObjectnessSample> obj;
    for (int i = 0; i < 4; ++i) obj.push_back({testing::random_vector(rng, dim), i % 2 == 0});
    const double beta = testing::uniform(rng, 0.5, 2.0);
    Gradients g = Gradients::like(m);
    loss_and_grads(m, rois, obj, beta, &g);

    const double h = 1e-6;
    auto check = [&](std::vector<double>& params, const std::vector<double>& grad) {
      for (std::size_t p = 0; p < params.size(); ++p) {
        const double saved = params[p];
        params[p] = saved + h;
        const double up = total_loss(m, rois, obj, beta);
        params[p] = saved - h;
        const double down = total_loss(m, rois, obj, beta);
        params[p] = saved;
        const double fd = (up - down) / (2 * h);
        if (std::abs(fd) > 1e-7 || std::abs(grad[p]) > 1e-7) {
          worst = std::max(worst, rel_error(fd, grad[p]));
        }
      }
    };
    check(m.cls.data, g.cls.data);
    check(m.reg.data, g.reg.data);
    check(m.obj, g.obj);
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(LossAndGrads, ZeroWeightSampleContributesNothing) {
  auto rng = make_rng(8);
  const DetectorModel m = random_model(rng, 2, 4);
  RoiSample s;
  s.feat = testing::random_vector(rng, 4);
  s.target = 0;
  s.weight = 0.0;
  s.box_target = BoxDelta{0.1, 0.1, 0.1, 0.1};
  Gradients g = Gradients::like(m);
  const std::vector<RoiSample> rois{s};
  const auto loss = loss_and_grads(m, rois, {}, 1.0, &g);
  EXPECT_EQ(loss.total(), 0.0);
  EXPECT_EQ(g.max_abs(), 0.0);
  std::vector<RoiSample> neg{s};
  neg[0].weight = -1.0;
  EXPECT_THROW(loss_and_grads(m, neg, {}, 1.0, nullptr), Error);
}

TEST(SgdStep, RejectsNonFiniteGradients) {
  auto rng = make_rng(9);
  DetectorModel m = random_model(rng, 2, 3);
  Gradients g = Gradients::like(m);
  g.cls.data[0] = std::nan("");
  EXPECT_THROW(sgd_step(m, g, 0.1), Error);
  Gradients ok = Gradients::like(m);
  ok.obj[0] = 1.0;
  const double before = m.obj[0];
  sgd_step(m, ok, 0.5);
  EXPECT_DOUBLE_EQ(m.obj[0], before - 0.5);
}

TEST(Sampling, NegativeBandHonoursExclusionAndPool) {
  auto rng = make_rng(10);
  const std::vector<BBox> cands{{0, 0, 4, 4}, {1, 0, 5, 4}, {10, 10, 14, 14}, {12, 12, 16, 16},
                                {20, 0, 24, 4}};
  const std::vector<WeightedAnnotation> targets{{{0, 0, 4, 4}, 0, 1.0, Origin::kGroundTruth}};
  const ScenePlan plan = plan_scene(cands, targets);
  std::vector<bool> excluded(cands.size(), false);
  excluded[3] = true;
  for (int i = 0; i < 20; ++i) {
    for (std::size_t idx : sample_negative_band(plan, 0.3, excluded, 10, rng)) {
      EXPECT_LT(plan.max_iou[idx], 0.3);
      EXPECT_NE(idx, 3u);
    }
  }
  const std::vector<std::size_t> pool{4, 1};
  const auto drawn = sample_negative_band(plan, 0.3, excluded, 10, rng, pool);
  EXPECT_EQ(drawn, (std::vector<std::size_t>{4}));
  const std::vector<std::size_t> bad{99};
  EXPECT_THROW(sample_negative_band(plan, 0.3, excluded, 1, rng, bad), Error);
}

TEST(Sampling, PositivesIncludeTargetsAndRespectThreshold) {
  auto rng = make_rng(11);
  const std::vector<BBox> cands{{0, 0, 4, 4}, {1, 0, 5, 4}, {2, 0, 6, 4}, {10, 10, 14, 14}};
  const std::vector<WeightedAnnotation> targets{{{0, 0, 4, 4}, 1, 1.0, Origin::kGroundTruth}};
  const ScenePlan plan = plan_scene(cands, targets);
  const auto pos = sample_positives(plan, targets, 0.5, 10, rng);
  // The target itself, the identical candidate and the 1-cell shift (IoU 0.6).
  EXPECT_EQ(pos.size(), 3u);
  for (const auto& [box, t] : pos) {
    EXPECT_EQ(t, 0);
    EXPECT_GE(iou(box, targets[0].box), 0.5);
  }
  EXPECT_EQ(sample_positives(plan, targets, 0.5, 2, rng).size(), 2u);
}

TrainingSet toy_set(std::vector<Scene>& storage) {
  TrainingSet set;
  for (const Scene& s : storage) {
    set.scenes.push_back(&s);
    std::vector<WeightedAnnotation> t;
    for (const auto& o : s.objects) t.push_back({o.box, o.class_id, 1.0, Origin::kGroundTruth});
    set.targets.push_back(std::move(t));
  }
  return set;
}

std::vector<Scene> toy_scenes(int n, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::vector<Scene> out;
  for (int i = 0; i < n; ++i) {
    const int x = 2 * testing::uniform_int(rng, 0, 6), y = 2 * testing::uniform_int(rng, 0, 6);
    Scene s = noiseless_scene({{{double(x), double(y), x + 8.0, y + 8.0}, i % 2}});
    s.scene_id = i;
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.proposals.window_sizes = {6, 8, 10};
  cfg.epochs = 40;
  return cfg;
}

TEST(TrainSupervised, NoiselessTwoClassToyConverges) {
  auto scenes = toy_scenes(256, 12);
  const TrainingSet set = toy_set(scenes);
  TrainConfig cfg;
  cfg.proposals.window_sizes = {6, 8, 10};
  double loss = 1.0;
  train_supervised(set, ClassRegistry::from_split("2"), {0, 1}, cfg, 3, &loss);
  EXPECT_LT(loss, 1e-2);
}

TEST(TrainSupervised, BestOverlappingCandidateRanksFirst) {
  auto scenes = toy_scenes(16, 13);
  const TrainingSet set = toy_set(scenes);
  const auto cfg = toy_config();
  const DetectorModel m = train_supervised(set, ClassRegistry::from_split("2"), {0, 1}, cfg, 4);
  const Scene probe = noiseless_scene({{{6, 4, 14, 12}, 1}});
  const auto ranked = propose(m, probe);
  EXPECT_EQ(ranked.front().box, (BBox{6, 4, 14, 12}));
}

TEST(TrainSupervised, DeterministicForSeed) {
  auto scenes = toy_scenes(6, 14);
  const TrainingSet set = toy_set(scenes);
  auto cfg = toy_config();
  cfg.epochs = 3;
  const auto reg = ClassRegistry::from_split("2");
  EXPECT_EQ(train_supervised(set, reg, {0, 1}, cfg, 5), train_supervised(set, reg, {0, 1}, cfg, 5));
}

TEST(TrainSupervised, RejectsBadInputs) {
  const auto reg = ClassRegistry::from_split("2");
  EXPECT_THROW(train_supervised({}, reg, {0, 1}, toy_config(), 0), Error);
  auto scenes = toy_scenes(2, 15);
  const TrainingSet set = toy_set(scenes);
  EXPECT_THROW(train_supervised(set, reg, {0}, toy_config(), 0), Error);
  auto cfg = toy_config();
  cfg.lr = -1.0;
  EXPECT_THROW(train_supervised(set, reg, {0, 1}, cfg, 0), ConfigError);
}

}  // namespace
}  // namespace bpf
