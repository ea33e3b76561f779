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

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bpf/error.hpp"

namespace bpf {

ClassRegistry::ClassRegistry(std::vector<std::vector<int>> stage_sets)
    : stage_sets_(std::move(stage_sets)) {
  std::set<int> seen;
  for (const auto& s : stage_sets_) {
    if (s.empty()) throw ConfigError("registry: empty stage class set");
    for (int c : s) {
      if (c < 0) throw ConfigError("registry: negative class id");
      if (!seen.insert(c).second) {
        throw ConfigError("registry: class " + std::to_string(c) +
                          " appears in more than one stage");
      }
    }
  }
}

ClassRegistry ClassRegistry::from_split(const std::string& split) {
  std::vector<std::vector<int>> sets;
  std::stringstream ss(split);
  std::string tok;
  int next = 0;
  while (std::getline(ss, tok, '-')) {
    int n = 0;
    try {
      std::size_t used = 0;
      n = std::stoi(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("registry: malformed split '" + split + "'");
    }
    if (n <= 0) throw ConfigError("registry: stage sizes must be positive");
    std::vector<int> s(n);
    for (int& c : s) c = next++;
    sets.push_back(std::move(s));
  }
  if (sets.empty()) throw ConfigError("registry: empty split");
  return ClassRegistry(std::move(sets));
}

int ClassRegistry::num_classes() const {
  int n = 0;
  for (const auto& s : stage_sets_) n += static_cast<int>(s.size());
  return n;
}

const std::vector<int>& ClassRegistry::stage(int t) const {
  if (t < 0 || t >= num_stages()) throw Error("registry: stage out of range");
  return stage_sets_[t];
}

std::vector<int> ClassRegistry::classes_through(int t) const {
  std::vector<int> out;
  for (int s = 0; s <= t && s < num_stages(); ++s) {
    out.insert(out.end(), stage_sets_[s].begin(), stage_sets_[s].end());
  }
  return out;
}

std::vector<int> ClassRegistry::past(int t) const { return classes_through(t - 1); }

std::vector<int> ClassRegistry::future(int t) const {
  std::vector<int> out;
  for (int s = t + 1; s < num_stages(); ++s) {
    out.insert(out.end(), stage_sets_[s].begin(), stage_sets_[s].end());
  }
  return out;
}

int ClassRegistry::stage_of(int class_id) const {
  for (int s = 0; s < num_stages(); ++s) {
    if (std::find(stage_sets_[s].begin(), stage_sets_[s].end(), class_id) !=
        stage_sets_[s].end()) {
      return s;
    }
  }
  return -1;
}

void SynthConfig::validate() const {
  if (grid_height <= 0 || grid_width <= 0 || channels <= 0) {
    throw ConfigError("synth: grid dimensions must be positive");
  }
  if (objects_min < 0 || objects_max < objects_min) {
    throw ConfigError("synth: invalid objects-per-scene range");
  }
  if (object_size_min < 1 || object_size_max < object_size_min ||
      object_size_max > std::min(grid_height, grid_width)) {
    throw ConfigError("synth: invalid object size range");
  }
  if (noise < 0.0 || signal <= noise) {
    throw ConfigError("synth: signal must exceed the non-negative noise level");
  }
  if (!(cooccurrence_rate >= 0.0 && cooccurrence_rate <= 1.0)) {
    throw ConfigError("synth: cooccurrence_rate must lie in [0,1]");
  }
  if (max_overlap < 0.0 || max_overlap > 1.0) {
    throw ConfigError("synth: max_overlap must lie in [0,1]");
  }
  if (max_tries <= 0 || scenes_per_stage <= 0 || test_scenes <= 0) {
    throw ConfigError("synth: counts must be positive");
  }
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"grid_height", c.grid_height},
                     {"grid_width", c.grid_width},
                     {"channels", c.channels},
                     {"objects_min", c.objects_min},
                     {"objects_max", c.objects_max},
                     {"object_size_min", c.object_size_min},
                     {"object_size_max", c.object_size_max},
                     {"signal", c.signal},
                     {"noise", c.noise},
                     {"max_overlap", c.max_overlap},
                     {"max_tries", c.max_tries},
                     {"scenes_per_stage", c.scenes_per_stage},
                     {"test_scenes", c.test_scenes},
                     {"cooccurrence_rate", c.cooccurrence_rate}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  const SynthConfig d = c;
  c.grid_height = j.value("grid_height", d.grid_height);
  c.grid_width = j.value("grid_width", d.grid_width);
  c.channels = j.value("channels", d.channels);
  c.objects_min = j.value("objects_min", d.objects_min);
  c.objects_max = j.value("objects_max", d.objects_max);
  c.object_size_min = j.value("object_size_min", d.object_size_min);
  c.object_size_max = j.value("object_size_max", d.object_size_max);
  c.signal = j.value("signal", d.signal);
  c.noise = j.value("noise", d.noise);
  c.max_overlap = j.value("max_overlap", d.max_overlap);
  c.max_tries = j.value("max_tries", d.max_tries);
  c.scenes_per_stage = j.value("scenes_per_stage", d.scenes_per_stage);
  c.test_scenes = j.value("test_scenes", d.test_scenes);
  c.cooccurrence_rate = j.value("cooccurrence_rate", d.cooccurrence_rate);
}

Prototypes make_prototypes(int num_classes, int channels, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x70726f746fULL}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Prototypes protos(num_classes, std::vector<double>(channels));
  for (auto& p : protos) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : p) {
        v = normal(rng);
        norm += v * v;
      }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    for (double& v : p) v /= norm;
  }
  return protos;
}

Scene generate_scene(const SynthConfig& cfg, const Prototypes& prototypes,
                     std::span<const int> object_classes, std::uint64_t scene_id,
                     Rng& rng) {
  Scene scene;
  scene.scene_id = scene_id;
  scene.features = FeatureGrid(cfg.grid_height, cfg.grid_width, cfg.channels);

  if (cfg.noise > 0.0) {
    std::normal_distribution<double> normal(0.0, cfg.noise);
    for (double& v : scene.features.data) v = normal(rng);
  }

  std::uniform_int_distribution<int> size_dist(cfg.object_size_min, cfg.object_size_max);
  for (int cls : object_classes) {
    if (cls < 0 || cls >= static_cast<int>(prototypes.size())) {
      throw Error("synth: class without prototype");
    }
    bool placed = false;
    BBox box;
    for (int attempt = 0; attempt < cfg.max_tries && !placed; ++attempt) {
      const int w = size_dist(rng);
      const int h = size_dist(rng);
      const int x = std::uniform_int_distribution<int>(0, cfg.grid_width - w)(rng);
      const int y = std::uniform_int_distribution<int>(0, cfg.grid_height - h)(rng);
      box = BBox{static_cast<double>(x), static_cast<double>(y),
                 static_cast<double>(x + w), static_cast<double>(y + h)};
      placed = std::all_of(scene.objects.begin(), scene.objects.end(),
                           [&](const Object& o) {
                             return iou(o.box, box) <= cfg.max_overlap;
                           });
    }
    if (!placed) throw Error("placement failure");
    scene.objects.push_back({box, cls});

    const auto& proto = prototypes[cls];
    const CellRange r = cells_in(box, cfg.grid_height, cfg.grid_width);
    for (int row = r.row_begin; row < r.row_end; ++row) {
      for (int col = r.col_begin; col < r.col_end; ++col) {
        for (int ch = 0; ch < cfg.channels; ++ch) {
          scene.features.at(row, col, ch) += cfg.signal * proto[ch];
        }
      }
    }
  }
  return scene;
}

namespace {

constexpr std::uint64_t kTrainTag = 0x747261696eULL;
constexpr std::uint64_t kTestTag = 0x74657374ULL;

std::vector<int> sample_classes(const SynthConfig& cfg, const std::vector<int>& on_stage,
                                const std::vector<int>& off_stage, Rng& rng) {
  const int n = std::uniform_int_distribution<int>(cfg.objects_min, cfg.objects_max)(rng);
  std::vector<int> out;
  std::bernoulli_distribution off(cfg.cooccurrence_rate);
  for (int k = 0; k < n; ++k) {
    // The first object always belongs to the stage so every scene carries labels.
    const bool use_off = k > 0 && !off_stage.empty() && off(rng);
    const auto& pool = use_off ? off_stage : on_stage;
    out.push_back(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
  }
  return out;
}

}  // namespace

Benchmark build_stage_datasets(const SynthConfig& cfg, const ClassRegistry& registry,
                               std::uint64_t seed) {
  cfg.validate();
  if (registry.num_stages() == 0) throw ConfigError("synth: registry has no stages");
  const int num_classes = registry.num_classes();
  for (int c = 0; c < num_classes; ++c) {
    if (registry.stage_of(c) < 0) {
      throw ConfigError("synth: registry class ids must be 0..N-1");
    }
  }

  Benchmark bench;
  bench.config = cfg;
  bench.registry = registry;
  bench.prototypes = make_prototypes(num_classes, cfg.channels, seed);

  for (int t = 0; t < registry.num_stages(); ++t) {
    StageDataset ds;
    ds.stage = t;
    ds.rng_seed = derive_seed(seed, {kTrainTag, static_cast<std::uint64_t>(t)});
    const auto& on_stage = registry.stage(t);
    std::vector<int> off_stage = registry.past(t);
    const auto fut = registry.future(t);
    off_stage.insert(off_stage.end(), fut.begin(), fut.end());

    for (int i = 0; i < cfg.scenes_per_stage; ++i) {
      const std::uint64_t id = (static_cast<std::uint64_t>(t + 1) << 32) | i;
      Rng rng(derive_seed(ds.rng_seed, {static_cast<std::uint64_t>(i)}));
      const auto classes = sample_classes(cfg, on_stage, off_stage, rng);
      Scene scene = generate_scene(cfg, bench.prototypes, classes, id, rng);
      std::vector<Object> vis;
      for (const auto& o : scene.objects) {
        if (registry.stage_of(o.class_id) == t) vis.push_back(o);
      }
      ds.visible.push_back(std::move(vis));
      ds.scenes.push_back(std::move(scene));
    }
    bench.train.push_back(std::move(ds));
  }

  StageDataset& test = bench.test;
  test.stage = registry.num_stages() - 1;
  test.full_labels = true;
  test.rng_seed = derive_seed(seed, {kTestTag});
  std::vector<int> all(num_classes);
  for (int c = 0; c < num_classes; ++c) all[c] = c;
  SynthConfig test_cfg = cfg;
  test_cfg.cooccurrence_rate = 0.0;
  for (int i = 0; i < cfg.test_scenes; ++i) {
    const std::uint64_t id = (0xffULL << 32) | i;
    Rng rng(derive_seed(test.rng_seed, {static_cast<std::uint64_t>(i)}));
    const auto classes = sample_classes(test_cfg, all, {}, rng);
    Scene scene = generate_scene(cfg, bench.prototypes, classes, id, rng);
    test.visible.push_back(scene.objects);
    test.scenes.push_back(std::move(scene));
  }
  return bench;
}

CooccurrenceStats cooccurrence_stats(const StageDataset& ds,
                                     const ClassRegistry& registry) {
  std::size_t past = 0, current = 0, future = 0;
  for (const auto& scene : ds.scenes) {
    for (const auto& o : scene.objects) {
      const int s = registry.stage_of(o.class_id);
      if (s < ds.stage) {
        ++past;
      } else if (s == ds.stage) {
        ++current;
      } else {
        ++future;
      }
    }
  }
  const std::size_t total = past + current + future;
  if (total == 0) throw Error("cooccurrence: empty dataset");
  const double n = static_cast<double>(total);
  return {past / n, current / n, future / n};
}

std::string config_hash(const SynthConfig& cfg) {
  std::ostringstream os;
  os << std::hex << fnv1a64(nlohmann::json(cfg).dump());
  return os.str();
}

namespace {

nlohmann::json objects_to_json(const std::vector<Object>& objs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& o : objs) {
    arr.push_back({{"box", {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}},
                   {"class_id", o.class_id}});
  }
  return arr;
}

std::vector<Object> objects_from_json(const nlohmann::json& arr) {
  std::vector<Object> out;
  for (const auto& o : arr) {
    const auto& b = o.at("box");
    out.push_back({BBox{b.at(0).get<double>(), b.at(1).get<double>(),
                        b.at(2).get<double>(), b.at(3).get<double>()},
                   o.at("class_id").get<int>()});
  }
  return out;
}

}  // namespace

nlohmann::json dataset_to_json(const StageDataset& ds, const ClassRegistry& registry,
                               const std::string& cfg_hash) {
  nlohmann::json j;
  j["config_hash"] = cfg_hash;
  j["registry"] = registry.stage_sets();
  j["stage"] = ds.stage;
  j["full_labels"] = ds.full_labels;
  j["rng_seed"] = ds.rng_seed;
  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    const Scene& s = ds.scenes[i];
    scenes.push_back({{"scene_id", s.scene_id},
                      {"height", s.features.height},
                      {"width", s.features.width},
                      {"channels", s.features.channels},
                      {"features", s.features.data},
                      {"objects", objects_to_json(s.objects)},
                      {"visible", objects_to_json(ds.visible[i])}});
  }
  j["scenes"] = std::move(scenes);
  return j;
}

StageDataset dataset_from_json(const nlohmann::json& j) {
  StageDataset ds;
  ds.stage = j.at("stage").get<int>();
  ds.full_labels = j.value("full_labels", false);
  ds.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  for (const auto& s : j.at("scenes")) {
    Scene scene;
    scene.scene_id = s.at("scene_id").get<std::uint64_t>();
    scene.features.height = s.at("height").get<int>();
    scene.features.width = s.at("width").get<int>();
    scene.features.channels = s.at("channels").get<int>();
    scene.features.data = s.at("features").get<std::vector<double>>();
    if (scene.features.data.size() != static_cast<std::size_t>(scene.features.height) *
                                          scene.features.width * scene.features.channels) {
      throw Error("dataset: feature array size mismatch");
    }
    scene.objects = objects_from_json(s.at("objects"));
    ds.visible.push_back(objects_from_json(s.at("visible")));
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

void save_dataset(const std::string& path, const StageDataset& ds,
                  const ClassRegistry& registry, const std::string& cfg_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << dataset_to_json(ds, registry, cfg_hash).dump() << '\n';
  if (!out) throw Error("write failed: " + path);
}

StageDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  try {
    return dataset_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path + ": parse error at byte " + std::to_string(e.byte));
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

}  // namespace bpf
