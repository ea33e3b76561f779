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

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bpf/detector.hpp"
#include "bpf/geom.hpp"
#include "bpf/synth.hpp"

namespace bpf {

enum class Interp { kAllPoint, kElevenPoint };

Interp parse_interp(const std::string& s);
std::string to_string(Interp i);

struct EvalConfig {
  Interp interp = Interp::kAllPoint;
  double iou = 0.5;
  /// Detections below this class probability are not emitted.
  double min_score = 0.01;
  double nms_iou = 0.5;
  int max_per_class = 20;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// One detection for one class; `scene` indexes the ground-truth table.
struct ScoredDetection {
  std::size_t scene = 0;
  BBox box;
  double confidence = 0.0;
};

struct MatchResult {
  /// TP flags in processing order (descending confidence, ties by index).
  std::vector<bool> true_positive;
  std::vector<std::size_t> order;
  /// gt_matched[scene][g]
  std::vector<std::vector<bool>> gt_matched;
};

/// Greedy VOC-style matching: each detection takes its best-IoU ground truth
/// in the same scene; a TP needs IoU >= thresh and an unmatched gt.
MatchResult match_detections(std::span<const ScoredDetection> dets,
                             const std::vector<std::vector<BBox>>& gts, double iou_thresh);

/// AP of one class; std::nullopt when the class has no ground truth.
std::optional<double> average_precision(std::span<const ScoredDetection> dets,
                                        const std::vector<std::vector<BBox>>& gts,
                                        double iou_thresh = 0.5,
                                        Interp interp = Interp::kAllPoint);

struct MapReport {
  std::map<int, double> per_class;
  /// Classes skipped for lack of ground truth.
  std::vector<int> undefined;
  std::optional<double> old_map;
  std::optional<double> new_map;
  double all_map = 0.0;
  double avg = 0.0;
};

/// Aggregates per-class AP at stage t: old = classes of stages < t, new =
/// classes of stage t, all = classes of stages <= t, Avg = (old + new) / 2
/// (Avg = all when t = 0).
MapReport map_report(const std::map<int, std::optional<double>>& ap,
                     const ClassRegistry& registry, int stage);

void to_json(nlohmann::json& j, const MapReport& r);

struct RecallCounts {
  std::size_t covered = 0;
  std::size_t total = 0;
  void add(const RecallCounts& o) {
    covered += o.covered;
    total += o.total;
  }
  /// Throws bpf::Error("undefined recall") when total is 0.
  double value() const;
};

RecallCounts recall_counts(std::span<const BBox> boxes, std::span<const BBox> gts,
                           double iou_thresh = 0.5);

/// Fraction of gts covered by at least one box at IoU >= thresh.
double recall_at_iou(std::span<const BBox> boxes, std::span<const BBox> gts,
                     double iou_thresh = 0.5);

/// Per-class detections of one scene: class-specific regressed boxes,
/// min-score filter, per-class NMS and a per-class cap.
std::map<int, std::vector<ScoredBox>> detect(const DetectorModel& model, const Scene& scene,
                                             const EvalConfig& cfg);

/// Evaluates a model on a fully labeled split over classes of stages <= t.
MapReport evaluate(const DetectorModel& model, const StageDataset& test,
                   const ClassRegistry& registry, int stage, const EvalConfig& cfg);

}  // namespace bpf
