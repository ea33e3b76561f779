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


#include "bpf/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "bpf/bridge_future.hpp"
#include "bpf/error.hpp"
#include "test_support.hpp"

namespace bpf {
namespace {

SynthConfig small_config() {
  SynthConfig c;
  c.grid_height = 20;
  c.grid_width = 20;
  c.channels = 6;
  c.object_size_min = 3;
  c.object_size_max = 6;
  c.scenes_per_stage = 30;
  c.test_scenes = 10;
  return c;
}

TEST(Registry, SplitAssignsConsecutiveIds) {
  const auto r = ClassRegistry::from_split("4-3-3");
  ASSERT_EQ(r.num_stages(), 3);
  EXPECT_EQ(r.num_classes(), 10);
  EXPECT_EQ(r.stage(1), (std::vector<int>{4, 5, 6}));
  EXPECT_EQ(r.past(2), (std::vector<int>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(r.future(0), (std::vector<int>{4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(r.stage_of(8), 2);
  EXPECT_EQ(r.stage_of(10), -1);
}

TEST(Registry, RejectsMalformedSplits) {
  EXPECT_THROW(ClassRegistry::from_split("5-x"), ConfigError);
  EXPECT_THROW(ClassRegistry::from_split("5-0"), ConfigError);
  EXPECT_THROW(ClassRegistry::from_split(""), ConfigError);
  EXPECT_THROW(ClassRegistry({{0, 1}, {1}}), ConfigError);
}

TEST(Prototypes, UnitNormAndDeterministic) {
  const auto p = make_prototypes(10, 16, 3);
  ASSERT_EQ(p.size(), 10u);
  for (const auto& v : p) {
    double n = 0.0;
    for (double x : v) n += x * x;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  EXPECT_EQ(p, make_prototypes(10, 16, 3));
  EXPECT_NE(p, make_prototypes(10, 16, 4));
}

TEST(GenerateScene, ZeroObjectsIsPureNoise) {
  auto cfg = small_config();
  auto rng = testing::make_rng(1);
  const auto protos = make_prototypes(2, cfg.channels, 1);
  const Scene s = generate_scene(cfg, protos, {}, 7, rng);
  EXPECT_TRUE(s.objects.empty());
  EXPECT_EQ(s.scene_id, 7u);
  double sq = 0.0;
  for (double v : s.features.data) sq += v * v;
  const double sd = std::sqrt(sq / static_cast<double>(s.features.data.size()));
  EXPECT_NEAR(sd, cfg.noise, 0.1 * cfg.noise);
}

TEST(GenerateScene, NoiselessObjectEqualsPrototype) {
  auto cfg = small_config();
  cfg.noise = 0.0;
  auto rng = testing::make_rng(2);
  const auto protos = make_prototypes(3, cfg.channels, 2);
  const std::vector<int> cls{2};
  const Scene s = generate_scene(cfg, protos, cls, 0, rng);
  ASSERT_EQ(s.objects.size(), 1u);
  const BBox& b = s.objects[0].box;
  for (int r = 0; r < cfg.grid_height; ++r) {
    for (int c = 0; c < cfg.grid_width; ++c) {
      const bool in = c >= b.x_min && c < b.x_max && r >= b.y_min && r < b.y_max;
      for (int ch = 0; ch < cfg.channels; ++ch) {
        ASSERT_EQ(s.features.at(r, c, ch), in ? cfg.signal * protos[2][ch] : 0.0);
      }
    }
  }
}

TEST(GenerateScene, ObjectsInsideExtentAndNonOverlapping) {
  auto cfg = small_config();
  auto rng = testing::make_rng(3);
  const auto protos = make_prototypes(4, cfg.channels, 3);
  for (int i = 0; i < 50; ++i) {
    const std::vector<int> cls{0, 1, 2};
    const Scene s = generate_scene(cfg, protos, cls, i, rng);
    const BBox e = s.extent();
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      const BBox& b = s.objects[a].box;
      ASSERT_TRUE(b.x_min >= e.x_min && b.y_min >= e.y_min && b.x_max <= e.x_max &&
                  b.y_max <= e.y_max);
      for (std::size_t c = a + 1; c < s.objects.size(); ++c) {
        ASSERT_LE(iou(b, s.objects[c].box), cfg.max_overlap);
      }
    }
  }
}

TEST(GenerateScene, PlacementFailure) {
  auto cfg = small_config();
  cfg.grid_height = cfg.grid_width = 6;
  cfg.object_size_min = cfg.object_size_max = 6;
  cfg.max_tries = 5;
  auto rng = testing::make_rng(4);
  const auto protos = make_prototypes(2, cfg.channels, 4);
  const std::vector<int> cls{0, 1};
  try {
    generate_scene(cfg, protos, cls, 0, rng);
    FAIL() << "expected placement failure";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "placement failure");
  }
}

TEST(GenerateScene, SameSeedSameScene) {
  auto cfg = small_config();
  const auto protos = make_prototypes(3, cfg.channels, 5);
  const std::vector<int> cls{0, 2};
  auto r1 = testing::make_rng(9), r2 = testing::make_rng(9);
  const Scene a = generate_scene(cfg, protos, cls, 1, r1);
  const Scene b = generate_scene(cfg, protos, cls, 1, r2);
  EXPECT_EQ(a.features.data, b.features.data);
  EXPECT_EQ(a.objects, b.objects);
}

TEST(SynthConfig, ValidationErrors) {
  auto bad = small_config();
  bad.cooccurrence_rate = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_config();
  bad.cooccurrence_rate = -0.1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_config();
  bad.signal = bad.noise;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_config();
  bad.object_size_max = 40;
  EXPECT_THROW(bad.validate(), ConfigError);
  const auto reg = ClassRegistry::from_split("2-2");
  bad = small_config();
  bad.cooccurrence_rate = 2.0;
  EXPECT_THROW(build_stage_datasets(bad, reg, 0), ConfigError);
}

TEST(BuildStageDatasets, ZeroCooccurrenceKeepsScenesOnStage) {
  auto cfg = small_config();
  cfg.cooccurrence_rate = 0.0;
  const auto reg = ClassRegistry::from_split("3-3");
  const auto bench = build_stage_datasets(cfg, reg, 11);
  for (const auto& ds : bench.train) {
    for (const auto& s : ds.scenes) {
      for (const auto& o : s.objects) ASSERT_EQ(reg.stage_of(o.class_id), ds.stage);
    }
  }
}

TEST(BuildStageDatasets, VisibleLabelsAreStrippedSubsets) {
  auto cfg = small_config();
  cfg.cooccurrence_rate = 0.7;
  const auto reg = ClassRegistry::from_split("5-5");
  const auto bench = build_stage_datasets(cfg, reg, 12);
  for (const auto& ds : bench.train) {
    ASSERT_EQ(ds.visible.size(), ds.scenes.size());
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
      for (const auto& v : ds.visible[i]) {
        ASSERT_EQ(reg.stage_of(v.class_id), ds.stage);
        ASSERT_NE(std::find(ds.scenes[i].objects.begin(), ds.scenes[i].objects.end(), v),
                  ds.scenes[i].objects.end());
      }
      std::size_t on_stage = 0;
      for (const auto& o : ds.scenes[i].objects) on_stage += reg.stage_of(o.class_id) == ds.stage;
      ASSERT_EQ(on_stage, ds.visible[i].size());
    }
  }
  EXPECT_TRUE(bench.test.full_labels);
  for (std::size_t i = 0; i < bench.test.scenes.size(); ++i) {
    EXPECT_EQ(bench.test.visible[i], bench.test.scenes[i].objects);
  }
}

TEST(BuildStageDatasets, SecondStageHidesFirstStageObjects) {
  auto cfg = small_config();
  cfg.cooccurrence_rate = 0.5;
  cfg.scenes_per_stage = 100;
  const auto reg = ClassRegistry::from_split("5-5");
  const auto bench = build_stage_datasets(cfg, reg, 13);
  std::size_t hidden_old = 0, visible = 0;
  for (std::size_t i = 0; i < bench.train[1].scenes.size(); ++i) {
    for (const auto& o : bench.train[1].scenes[i].objects) hidden_old += o.class_id < 5;
    visible += bench.train[1].visible[i].size();
  }
  EXPECT_GT(hidden_old, 0u);
  EXPECT_GT(visible, hidden_old);
}

TEST(BuildStageDatasets, DeterministicSerialization) {
  const auto cfg = small_config();
  const auto reg = ClassRegistry::from_split("2-2");
  const auto a = build_stage_datasets(cfg, reg, 21);
  const auto b = build_stage_datasets(cfg, reg, 21);
  const auto h = config_hash(cfg);
  EXPECT_EQ(dataset_to_json(a.train[1], reg, h).dump(), dataset_to_json(b.train[1], reg, h).dump());
  EXPECT_EQ(dataset_to_json(a.test, reg, h).dump(), dataset_to_json(b.test, reg, h).dump());
  const auto c = build_stage_datasets(cfg, reg, 22);
  EXPECT_NE(dataset_to_json(a.train[0], reg, h).dump(), dataset_to_json(c.train[0], reg, h).dump());
}

TEST(Dataset, FileRoundTrip) {
  const auto cfg = small_config();
  const auto reg = ClassRegistry::from_split("2-2");
  const auto bench = build_stage_datasets(cfg, reg, 23);
  const auto path = std::filesystem::temp_directory_path() / "bpfsim_synth_roundtrip.json";
  save_dataset(path.string(), bench.train[1], reg, config_hash(cfg));
  const StageDataset back = load_dataset(path.string());
  std::filesystem::remove(path);
  ASSERT_EQ(back.scenes.size(), bench.train[1].scenes.size());
  EXPECT_EQ(back.stage, 1);
  EXPECT_EQ(back.rng_seed, bench.train[1].rng_seed);
  for (std::size_t i = 0; i < back.scenes.size(); ++i) {
    EXPECT_EQ(back.scenes[i].features.data, bench.train[1].scenes[i].features.data);
    EXPECT_EQ(back.scenes[i].objects, bench.train[1].scenes[i].objects);
    EXPECT_EQ(back.visible[i], bench.train[1].visible[i]);
  }
}

TEST(Dataset, MissingAndCorruptFiles) {
  EXPECT_THROW(load_dataset("/nonexistent/bpfsim.json"), Error);
  const auto path = std::filesystem::temp_directory_path() / "bpfsim_corrupt.json";
  {
    std::ofstream(path) << "{\"stage\": ";
  }
  EXPECT_THROW(load_dataset(path.string()), Error);
  std::filesystem::remove(path);
}

TEST(Cooccurrence, FirstStageHasNoPastAndLastNoFuture) {
  auto cfg = small_config();
  cfg.cooccurrence_rate = 0.6;
  const auto reg = ClassRegistry::from_split("2-2-2");
  const auto bench = build_stage_datasets(cfg, reg, 31);
  const auto first = cooccurrence_stats(bench.train[0], reg);
  const auto last = cooccurrence_stats(bench.train[2], reg);
  EXPECT_EQ(first.past, 0.0);
  EXPECT_EQ(last.future, 0.0);
  EXPECT_NEAR(first.past + first.current + first.future, 1.0, 1e-12);
}

TEST(Cooccurrence, MatchesDirectRecount) {
  auto cfg = small_config();
  cfg.cooccurrence_rate = 0.5;
  const auto reg = ClassRegistry::from_split("4-3-3");
  const auto bench = build_stage_datasets(cfg, reg, 32);
  const auto& ds = bench.train[1];
  double counts[3] = {0, 0, 0};
  double total = 0;
  for (const auto& s : ds.scenes) {
    for (const auto& o : s.objects) {
      const int g = o.class_id < 4 ? 0 : (o.class_id < 7 ? 1 : 2);
      counts[g] += 1;
      total += 1;
    }
  }
  const auto st = cooccurrence_stats(ds, reg);
  EXPECT_DOUBLE_EQ(st.past, counts[0] / total);
  EXPECT_DOUBLE_EQ(st.current, counts[1] / total);
  EXPECT_DOUBLE_EQ(st.future, counts[2] / total);
}

TEST(Cooccurrence, EmptyDatasetThrows) {
  StageDataset ds;
  EXPECT_THROW(cooccurrence_stats(ds, ClassRegistry::from_split("1-1")), Error);
}

TEST(Separability, NoiselessObjectsOutshineEmptyRegions) {
  auto cfg = small_config();
  cfg.noise = 0.0;
  const auto protos = make_prototypes(4, cfg.channels, 41);
  auto rng = testing::make_rng(41);
  for (int i = 0; i < 30; ++i) {
    const std::vector<int> cls{i % 4, (i + 1) % 4};
    const Scene s = generate_scene(cfg, protos, cls, i, rng);
    const auto attn = attention_map(s.features, 2.0);
    for (const auto& o : s.objects) {
      const double inside = region_avg(attn.grid, o.box);
      for (int y = 0; y + o.box.height() <= cfg.grid_height; ++y) {
        for (int x = 0; x + o.box.width() <= cfg.grid_width; ++x) {
          const BBox w{double(x), double(y), x + o.box.width(), y + o.box.height()};
          bool empty = true;
          for (const auto& other : s.objects) empty = empty && iou(w, other.box) == 0.0;
          if (empty) ASSERT_GT(inside, region_avg(attn.grid, w));
        }
      }
    }
  }
}

}  // namespace
}  // namespace bpf
