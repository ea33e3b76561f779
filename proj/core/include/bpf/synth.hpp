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

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bpf/geom.hpp"
#include "bpf/rng.hpp"

namespace bpf {

/// Ordered, pairwise-disjoint class sets, one per incremental stage.
/// Background is not a class id; it always occupies the last probability slot.
class ClassRegistry {
 public:
  ClassRegistry() = default;
  explicit ClassRegistry(std::vector<std::vector<int>> stage_sets);

  /// "5-5" or "4-3-3": consecutive class ids per stage.
  static ClassRegistry from_split(const std::string& split);

  int num_stages() const { return static_cast<int>(stage_sets_.size()); }
  int num_classes() const;
  const std::vector<int>& stage(int t) const;
  const std::vector<std::vector<int>>& stage_sets() const { return stage_sets_; }

  /// Classes of stages [0, t], in stage order.
  std::vector<int> classes_through(int t) const;
  /// Classes of stages [0, t).
  std::vector<int> past(int t) const;
  /// Classes of stages (t, T).
  std::vector<int> future(int t) const;
  /// Stage index owning `class_id`, or -1.
  int stage_of(int class_id) const;

  bool operator==(const ClassRegistry&) const = default;

 private:
  std::vector<std::vector<int>> stage_sets_;
};

struct SynthConfig {
  int grid_height = 32;
  int grid_width = 32;
  int channels = 16;
  int objects_min = 1;
  int objects_max = 3;
  int object_size_min = 6;
  int object_size_max = 12;
  double signal = 1.0;
  /// Per-channel standard deviation of the background noise.
  double noise = 0.5;
  double max_overlap = 0.0;
  int max_tries = 200;
  int scenes_per_stage = 200;
  int test_scenes = 100;
  double cooccurrence_rate = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// H x W x C feature tensor standing in for a backbone feature map, row-major
/// with channels innermost.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int c)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, 0.0) {}

  double& at(int row, int col, int ch) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  double at(int row, int col, int ch) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  std::span<const double> cell(int row, int col) const {
    return {data.data() + (static_cast<std::size_t>(row) * width + col) * channels,
            static_cast<std::size_t>(channels)};
  }
};

struct Object {
  BBox box;
  int class_id = 0;

  bool operator==(const Object&) const = default;
};

struct Scene {
  std::uint64_t scene_id = 0;
  FeatureGrid features;
  /// Hidden ground truth over all stages.
  std::vector<Object> objects;

  BBox extent() const {
    return {0.0, 0.0, static_cast<double>(features.width),
            static_cast<double>(features.height)};
  }
};

struct StageDataset {
  int stage = 0;
  std::vector<Scene> scenes;
  /// Per-scene annotations restricted to the stage's classes (full labels on
  /// the test split).
  std::vector<std::vector<Object>> visible;
  std::uint64_t rng_seed = 0;
  bool full_labels = false;
};

/// Fixed random unit vector per class, indexed by class id.
using Prototypes = std::vector<std::vector<double>>;

Prototypes make_prototypes(int num_classes, int channels, std::uint64_t seed);

/// Places one object per entry of `object_classes` on a noise background.
/// Throws bpf::Error("placement failure") after cfg.max_tries failed attempts.
Scene generate_scene(const SynthConfig& cfg, const Prototypes& prototypes,
                     std::span<const int> object_classes, std::uint64_t scene_id,
                     Rng& rng);

struct Benchmark {
  SynthConfig config;
  ClassRegistry registry;
  Prototypes prototypes;
  std::vector<StageDataset> train;
  StageDataset test;
};

Benchmark build_stage_datasets(const SynthConfig& cfg, const ClassRegistry& registry,
                               std::uint64_t seed);

struct CooccurrenceStats {
  double past = 0.0;
  double current = 0.0;
  double future = 0.0;
};

CooccurrenceStats cooccurrence_stats(const StageDataset& ds,
                                     const ClassRegistry& registry);

std::string config_hash(const SynthConfig& cfg);

nlohmann::json dataset_to_json(const StageDataset& ds, const ClassRegistry& registry,
                               const std::string& cfg_hash);
StageDataset dataset_from_json(const nlohmann::json& j);
void save_dataset(const std::string& path, const StageDataset& ds,
                  const ClassRegistry& registry, const std::string& cfg_hash);
StageDataset load_dataset(const std::string& path);

}  // namespace bpf
