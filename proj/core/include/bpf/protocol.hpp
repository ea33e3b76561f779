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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpf/bridge_future.hpp"
#include "bpf/bridge_past.hpp"
#include "bpf/detector.hpp"
#include "bpf/distill.hpp"
#include "bpf/eval.hpp"
#include "bpf/synth.hpp"

namespace bpf {

inline constexpr int kCheckpointSchema = 1;
inline constexpr const char* kVersion = "0.1.0";

enum class Method {
  kFinetune,
  kJoint,
  kUkd,
  kBpf,
  kBpfNoBp,
  kBpfNoBf,
  kBpfNoDwf,
  kBpUkd,
  kBfUkd,
};

enum class DistillKind { kNone, kUkd, kDwf };

/// Mechanisms a method switches on in stages after the first.
struct MethodSpec {
  bool bridge_past = false;
  bool bridge_future = false;
  DistillKind distill = DistillKind::kNone;
};

Method parse_method(const std::string& s);
std::string to_string(Method m);
MethodSpec method_spec(Method m);

/// Scene generator settings of the incremental benchmark: noisier scenes with
/// more off-stage objects than the SynthConfig defaults, and a larger test split.
SynthConfig benchmark_synth();
/// Training settings of the incremental benchmark: 60 epochs, cosine schedule.
TrainConfig benchmark_train();

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string split = "5-5";
  Method method = Method::kBpf;
  /// Weight of the distillation term in the stage loss.
  double alpha = 1.0;
  SynthConfig synth = benchmark_synth();
  TrainConfig train = benchmark_train();
  BPConfig bp;
  BFConfig bf;
  DistillConfig distill;
  EvalConfig eval;

  void validate() const;
  ClassRegistry registry() const { return ClassRegistry::from_split(split); }
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig config_from_json(const nlohmann::json& j);
/// TOML text; unknown keys are rejected with bpf::ConfigError.
ExperimentConfig parse_config(const std::string& toml_text, const std::string& origin = "config");
ExperimentConfig load_config(const std::string& path);
std::string hash_of(const ExperimentConfig& c);

struct RecallStat {
  std::size_t covered = 0;
  std::size_t total = 0;
  std::optional<double> value() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(covered) / static_cast<double>(total);
  }
};

struct StageStats {
  std::size_t pseudo_labels = 0;
  std::size_t pseudo_high_weight = 0;
  std::size_t pseudo_low_weight = 0;
  RecallStat pseudo_old;
  std::size_t discarded = 0;
  RecallStat discard_future;
  RecallStat discard_unlabeled;
  RecallStat distillprop_old;
  RecallStat distillprop_new;
  std::size_t negatives_sampled = 0;
  /// Sampled negatives that belong to the discard set; must stay 0.
  std::size_t negatives_in_discard = 0;
  std::size_t exhausted_batches = 0;
  CooccurrenceStats cooccurrence;
  double final_loss = 0.0;
};

struct StageResult {
  int stage = 0;
  std::string checkpoint;
  MapReport map;
  StageStats stats;
};

nlohmann::json to_json(const StageResult& r);

/// Where per-scene debug dumps go; empty disables them.
struct DumpOptions {
  std::string dir;
  bool bridge_past = false;
  bool bridge_future = false;
};

struct StageOutcome {
  DetectorModel model;
  StageResult result;
};

/// New class rows and regressor blocks are zero; old weights are copied.
/// Throws bpf::Error when a new class is already known.
DetectorModel expand_model(const DetectorModel& m_prev, const std::vector<int>& new_classes);

/// Trains stage t from the previous model and exactly one stage dataset, then
/// evaluates on the fully labeled test split.
StageOutcome run_stage(int t, const DetectorModel* m_prev, const StageDataset& ds,
                       const StageDataset& test, const ClassRegistry& registry,
                       const ExperimentConfig& cfg, const DumpOptions& dump = {});

/// Single-stage training over every training scene with full labels.
StageOutcome run_joint(const Benchmark& bench, const ExperimentConfig& cfg);

void save_checkpoint(const DetectorModel& model, const std::string& path,
                     const std::string& train_cfg_hash = "");
DetectorModel load_checkpoint(const std::string& path);

struct ExperimentReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<StageResult> stages;

  const StageResult& final_stage() const { return stages.back(); }
};

nlohmann::json to_json(const ExperimentReport& r);

/// Runs several methods over one benchmark, sharing the first-stage model.
/// With a non-empty out_dir each method writes `<out_dir>/<method>/`.
std::vector<ExperimentReport> run_methods(const ExperimentConfig& cfg,
                                          const std::vector<Method>& methods,
                                          const std::string& out_dir = "",
                                          const DumpOptions& dump = {});

/// Builds the benchmark, runs every stage of cfg.method and, with a non-empty
/// out_dir, persists checkpoints, report.json, ap.csv and manifest.json.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir = "",
                                const DumpOptions& dump = {});

/// Writes report.json, ap.csv and manifest.json for a finished report.
void write_run_dir(const ExperimentReport& report, const ExperimentConfig& cfg,
                   const std::string& dir);

std::string ap_csv(const std::vector<ExperimentReport>& reports);
std::string summary_csv(const std::vector<ExperimentReport>& reports);

struct AblationRow {
  std::string label;
  ExperimentConfig config;
};

/// "table5": (a)-(e) mechanism grid; "table4": teacher/box-mode grid;
/// "bf-clauses": attention/objectness clause grid.
std::vector<AblationRow> ablation_grid(const std::string& name, const ExperimentConfig& base);

std::string format_double(double v);

}  // namespace bpf
