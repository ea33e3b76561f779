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


#include "bpf/protocol.hpp"

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "bpf/error.hpp"
#include "test_support.hpp"

namespace bpf {
namespace {

namespace fs = std::filesystem;
using testing::make_rng;

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.split = "2-2";
  c.synth.grid_height = c.synth.grid_width = 16;
  c.synth.channels = 4;
  c.synth.object_size_min = 4;
  c.synth.object_size_max = 6;
  c.synth.scenes_per_stage = 16;
  c.synth.test_scenes = 8;
  c.train.epochs = 2;
  c.train.proposals.window_sizes = {4, 6};
  c.train.proposals.top_n = 60;
  c.distill.n_top = 32;
  c.distill.n_sample = 16;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bpfsim_protocol_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Method, ParseRoundTrip) {
  for (auto m : {Method::kFinetune, Method::kJoint, Method::kUkd, Method::kBpf, Method::kBpfNoBp,
                 Method::kBpfNoBf, Method::kBpfNoDwf, Method::kBpUkd, Method::kBfUkd}) {
    EXPECT_EQ(parse_method(to_string(m)), m);
  }
  EXPECT_THROW(parse_method("magic"), ConfigError);
  EXPECT_TRUE(method_spec(Method::kBpf).bridge_past);
  EXPECT_EQ(method_spec(Method::kBpf).distill, DistillKind::kDwf);
  EXPECT_FALSE(method_spec(Method::kBpfNoBp).bridge_past);
  EXPECT_FALSE(method_spec(Method::kBpfNoBf).bridge_future);
  EXPECT_EQ(method_spec(Method::kBpfNoDwf).distill, DistillKind::kUkd);
  EXPECT_EQ(method_spec(Method::kUkd).distill, DistillKind::kUkd);
  EXPECT_FALSE(method_spec(Method::kFinetune).bridge_future);
}

TEST(Config, ParsesTomlAndRejectsBadInput) {
  const auto c = parse_config("seed = 3\nsplit = \"4-3-3\"\nmethod = \"ukd\"\n[synth]\nnoise = 0.3\n");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.registry().num_stages(), 3);
  EXPECT_EQ(c.method, Method::kUkd);
  EXPECT_EQ(c.synth.noise, 0.3);
  EXPECT_THROW(parse_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[synth]\nnoies = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = \n"), ConfigError);
  EXPECT_THROW(parse_config("method = \"bpf\"\nsplit = \"5\"\n"), ConfigError);
  EXPECT_THROW(parse_config("[bp]\neta = 2.0\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nwindow_sizes = [40]\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.toml"), ConfigError);
}

TEST(Config, JsonRoundTripAndHash) {
  const auto c = tiny_config();
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(hash_of(back), hash_of(c));
  auto d = c;
  d.seed = 1;
  EXPECT_NE(hash_of(d), hash_of(c));
}

TEST(ExpandModel, PreservesOldOutputsAndZeroInitsNewRows) {
  auto rng = make_rng(1);
  const auto reg = ClassRegistry::from_split("2-2");
  DetectorModel m = DetectorModel::zeros(reg, {0, 1}, 5);
  m.cls = testing::random_matrix(rng, 3, 5, 1.0);
  m.reg = testing::random_matrix(rng, 8, 5, 1.0);
  m.obj = testing::random_vector(rng, 5);
  const DetectorModel e = expand_model(m, {2, 3});
  EXPECT_EQ(e.classes, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(e.background_index(), 4);
  for (int i = 0; i < 50; ++i) {
    const auto f = testing::random_vector(rng, 5);
    const auto zo = logits(m, f), ze = logits(e, f);
    EXPECT_EQ(ze[0], zo[0]);
    EXPECT_EQ(ze[1], zo[1]);
    EXPECT_EQ(ze[2], 0.0);
    EXPECT_EQ(ze[3], 0.0);
    EXPECT_EQ(ze[4], zo[2]);
    EXPECT_EQ(regress(e, f, 1), regress(m, f, 1));
    EXPECT_EQ(objectness(e, f), objectness(m, f));
  }
  EXPECT_EQ(expand_model(m, {}), m);
  EXPECT_THROW(expand_model(m, {1}), Error);
}

TEST(Checkpoint, RoundTripAndErrors) {
  auto rng = make_rng(2);
  const auto reg = ClassRegistry::from_split("2-2");
  DetectorModel m = DetectorModel::zeros(reg, {0, 1}, 6);
  m.cls = testing::random_matrix(rng, 3, 6, 1.0);
  m.reg = testing::random_matrix(rng, 8, 6, 1.0);
  m.obj = testing::random_vector(rng, 6);
  const fs::path dir = temp_dir("ckpt");
  const std::string path = (dir / "m.json").string();
  save_checkpoint(m, path, "abc");
  const DetectorModel back = load_checkpoint(path);
  EXPECT_EQ(back, m);
  for (int i = 0; i < 20; ++i) {
    const auto f = testing::random_vector(rng, 6, 2.0);
    const auto a = classify(m, f), b = classify(back, f);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
  EXPECT_THROW(load_checkpoint((dir / "missing.json").string()), Error);
  std::ofstream((dir / "bad.json").string()) << "{\"schema_version\": ";
  EXPECT_THROW(load_checkpoint((dir / "bad.json").string()), Error);
  std::ofstream((dir / "old.json").string()) << "{\"schema_version\": 99}";
  EXPECT_THROW(load_checkpoint((dir / "old.json").string()), Error);
  fs::remove_all(dir);
}

TEST(AblationGrid, LabelsAndMethods) {
  const auto base = tiny_config();
  const auto t5 = ablation_grid("table5", base);
  ASSERT_EQ(t5.size(), 5u);
  const std::vector<Method> expect{Method::kUkd, Method::kBpUkd, Method::kBfUkd, Method::kBpfNoDwf,
                                   Method::kBpf};
  for (std::size_t i = 0; i < t5.size(); ++i) {
    EXPECT_EQ(t5[i].label, std::string(1, char('a' + i)));
    EXPECT_EQ(t5[i].config.method, expect[i]);
  }
  EXPECT_EQ(ablation_grid("table4", base).size(), 3u);
  EXPECT_EQ(ablation_grid("table4", base)[0].config.distill.lambda2, 1.0);
  EXPECT_EQ(ablation_grid("bf-clauses", base).size(), 4u);
  EXPECT_THROW(ablation_grid("table9", base), ConfigError);
}

TEST(RunMethods, DeterministicReports) {
  const auto cfg = tiny_config();
  const auto a = run_methods(cfg, {Method::kBpf, Method::kFinetune});
  const auto b = run_methods(cfg, {Method::kBpf, Method::kFinetune});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(to_json(a[0]).dump(), to_json(b[0]).dump());
  EXPECT_EQ(to_json(a[1]).dump(), to_json(b[1]).dump());
  EXPECT_EQ(ap_csv(a), ap_csv(b));
  EXPECT_EQ(summary_csv(a), summary_csv(b));
  for (const auto& r : a) {
    ASSERT_EQ(r.stages.size(), 2u);
    for (const auto& s : r.stages) {
      EXPECT_GE(s.map.all_map, 0.0);
      EXPECT_LE(s.map.all_map, 1.0);
    }
    EXPECT_EQ(r.final_stage().stats.negatives_in_discard, 0u);
  }
  // Both methods share the stage-0 model.
  EXPECT_EQ(to_json(a[0].stages[0]).dump(), to_json(a[1].stages[0]).dump());
}

TEST(RunMethods, ThreeStageSplitGrowsRegistry) {
  auto cfg = tiny_config();
  cfg.split = "2-1-1";
  cfg.method = Method::kBpf;
  const fs::path dir = temp_dir("three");
  const auto r = run_experiment(cfg, dir.string());
  ASSERT_EQ(r.stages.size(), 3u);
  std::size_t prev = 0;
  for (int t = 0; t < 3; ++t) {
    const DetectorModel m = load_checkpoint((dir / r.stages[t].checkpoint).string());
    EXPECT_GT(m.classes.size(), prev);
    prev = m.classes.size();
  }
  EXPECT_EQ(prev, 4u);
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}

TEST(RunStage, CheckpointedPreviousModelReproducesInMemoryRun) {
  const auto cfg = tiny_config();
  const auto reg = cfg.registry();
  const Benchmark bench = build_stage_datasets(cfg.synth, reg, cfg.seed);
  const StageOutcome s0 = run_stage(0, nullptr, bench.train[0], bench.test, reg, cfg);
  const fs::path dir = temp_dir("resume");
  save_checkpoint(s0.model, (dir / "s0.json").string());
  const DetectorModel loaded = load_checkpoint((dir / "s0.json").string());
  const auto a = run_stage(1, &s0.model, bench.train[1], bench.test, reg, cfg);
  const auto b = run_stage(1, &loaded, bench.train[1], bench.test, reg, cfg);
  EXPECT_EQ(to_json(a.result).dump(), to_json(b.result).dump());
  EXPECT_EQ(a.model, b.model);
  fs::remove_all(dir);
}

TEST(RunStage, RejectsMismatchedInputs) {
  const auto cfg = tiny_config();
  const auto reg = cfg.registry();
  const Benchmark bench = build_stage_datasets(cfg.synth, reg, cfg.seed);
  EXPECT_THROW(run_stage(1, nullptr, bench.train[1], bench.test, reg, cfg), Error);
  const StageOutcome s0 = run_stage(0, nullptr, bench.train[0], bench.test, reg, cfg);
  const auto other = ClassRegistry::from_split("1-3");
  EXPECT_THROW(run_stage(1, &s0.model, bench.train[1], bench.test, other, cfg), Error);
}

TEST(RunJoint, SingleStageOverAllClasses) {
  auto cfg = tiny_config();
  cfg.method = Method::kJoint;
  const auto r = run_experiment(cfg);
  ASSERT_EQ(r.stages.size(), 1u);
  EXPECT_EQ(r.stages[0].map.per_class.size() + r.stages[0].map.undefined.size(), 4u);
}

}  // namespace
}  // namespace bpf
