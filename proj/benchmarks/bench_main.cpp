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

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "bpf/bridge_future.hpp"
#include "bpf/detector.hpp"
#include "bpf/distill.hpp"
#include "bpf/eval.hpp"
#include "bpf/geom.hpp"
#include "bpf/synth.hpp"

namespace {

using namespace bpf;

BBox random_box(Rng& rng, double extent) {
  std::uniform_real_distribution<double> u(0.0, extent);
  const double x = u(rng), y = u(rng);
  const double w = 1.0 + u(rng) * 0.3, h = 1.0 + u(rng) * 0.3;
  return {x, y, x + w, y + h};
}

Scene default_scene(std::uint64_t seed) {
  const SynthConfig cfg;
  const auto protos = make_prototypes(10, cfg.channels, seed);
  Rng rng(seed);
  const std::vector<int> classes{0, 3, 7};
  return generate_scene(cfg, protos, classes, 0, rng);
}

DetectorModel random_model(Rng& rng, int k, int dim) {
  std::vector<int> classes(k);
  for (int i = 0; i < k; ++i) classes[i] = i;
  DetectorModel m = DetectorModel::zeros(ClassRegistry::from_split(std::to_string(k)), classes, dim);
  std::normal_distribution<double> n(0.0, 0.1);
  for (double& v : m.cls.data) v = n(rng);
  for (double& v : m.reg.data) v = n(rng);
  for (double& v : m.obj) v = n(rng);
  return m;
}

void BM_Iou(benchmark::State& state) {
  Rng rng(1);
  std::vector<BBox> boxes;
  for (int i = 0; i < 1024; ++i) boxes.push_back(random_box(rng, 32));
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(iou(boxes[i % 1024], boxes[(i * 7 + 3) % 1024]));
    ++i;
  }
}
BENCHMARK(BM_Iou);

void BM_Nms(benchmark::State& state) {
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ScoredBox> dets;
  for (int i = 0; i < state.range(0); ++i) dets.push_back({random_box(rng, 32), u(rng), {}});
  for (auto _ : state) benchmark::DoNotOptimize(nms_indices(dets, 0.5));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(16, 1024)->Complexity();

void BM_RoiPooler(benchmark::State& state) {
  const Scene scene = default_scene(3);
  for (auto _ : state) benchmark::DoNotOptimize(RoiPooler(scene.features, 2.0));
}
BENCHMARK(BM_RoiPooler);

void BM_RoiFeature(benchmark::State& state) {
  const Scene scene = default_scene(4);
  const RoiPooler pooler(scene.features, 2.0);
  std::vector<double> out(pooler.dim());
  const BBox box{6, 8, 16, 18};
  for (auto _ : state) {
    pooler.feature_into(box, out);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_RoiFeature);

void BM_Propose(benchmark::State& state) {
  const Scene scene = default_scene(5);
  Rng rng(5);
  const DetectorModel m = random_model(rng, 10, roi_feature_dim(scene.features.channels));
  const RoiPooler pooler(scene.features, m.proposals.ring_width);
  const auto cands = candidate_boxes(m.proposals, scene.features.height, scene.features.width);
  const CandidateFeatures features(pooler, cands);
  for (auto _ : state) benchmark::DoNotOptimize(propose(m, features, m.proposals.top_n));
  state.counters["candidates"] = static_cast<double>(cands.size());
}
BENCHMARK(BM_Propose);

void BM_AttentionMap(benchmark::State& state) {
  const Scene scene = default_scene(6);
  for (auto _ : state) benchmark::DoNotOptimize(attention_map(scene.features, 2.0));
}
BENCHMARK(BM_AttentionMap);

void BM_ComposeAndKl(benchmark::State& state) {
  Rng rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  auto draw = [&](int k) {
    std::vector<double> z(k);
    for (double& v : z) v = n(rng);
    return softmax(z);
  };
  const TargetLayout layout{5, 5};
  const ProbVector p_old = draw(6), p_im = draw(6), student = draw(11);
  for (auto _ : state) {
    const auto t = compose_target_r1(p_old, p_im, layout);
    benchmark::DoNotOptimize(kl_div(t.probs, student));
  }
}
BENCHMARK(BM_ComposeAndKl);

void BM_AveragePrecision(benchmark::State& state) {
  Rng rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<BBox>> gts(100);
  std::vector<ScoredDetection> dets;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    for (int k = 0; k < 3; ++k) gts[s].push_back(random_box(rng, 32));
    for (int k = 0; k < 20; ++k) {
      const BBox b = k < 3 ? gts[s][k] : random_box(rng, 32);
      dets.push_back({s, b, u(rng)});
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(average_precision(dets, gts));
}
BENCHMARK(BM_AveragePrecision);

}  // namespace

BENCHMARK_MAIN();
