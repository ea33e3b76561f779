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

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bpf/annotation.hpp"
#include "bpf/detector.hpp"

namespace bpf {

struct BPConfig {
  double eta = 0.75;
  double lambda1 = 0.7;
  double nms_iou = 0.5;
  double weight_split_iou = 0.3;
  double high_weight = 1.0;
  double low_weight = 0.3;

  void validate() const;
};

void to_json(nlohmann::json& j, const BPConfig& c);
void from_json(const nlohmann::json& j, BPConfig& c);

/// The previous-stage model's top objectness proposals, classified in rank
/// order. Each detection box is the regressed box of its arg-max class,
/// clamped to the scene extent. No score threshold is applied.
std::vector<Detection> predict_old(const DetectorModel& m_old, const Scene& scene);
std::vector<Detection> predict_old(const DetectorModel& m_old, const RoiPooler& pooler,
                                   std::span<const BBox> candidates, const BBox& extent);

enum class DropReason { kKept, kBelowThreshold, kSuppressed, kOverlapsGroundTruth };

std::string to_string(DropReason r);

/// Per-detection outcome of the pseudo-label pipeline (debug dump).
struct PseudoLabelTrace {
  struct Entry {
    std::size_t detection = 0;
    int class_id = 0;
    double score = 0.0;
    double gt_iou = 0.0;
    DropReason reason = DropReason::kBelowThreshold;
    double weight = 0.0;
  };
  /// Entries for detections that passed the confidence threshold.
  std::vector<Entry> entries;
  std::size_t below_threshold = 0;
};

/// Confidence gate over old classes, class-agnostic NMS, IoU gate against the
/// ground truth and two-level weighting. `old_classes[k]` names probability
/// slot k of every detection.
std::vector<WeightedAnnotation> select_pseudo_labels(std::span<const Detection> dets,
                                                     std::span<const int> old_classes,
                                                     std::span<const WeightedAnnotation> gt,
                                                     const BPConfig& cfg,
                                                     PseudoLabelTrace* trace = nullptr);

/// gt followed by pseudo. Throws bpf::Error("stage violation") when a pseudo
/// label names a class of the current stage.
std::vector<WeightedAnnotation> merge_targets(std::span<const WeightedAnnotation> gt,
                                              std::span<const WeightedAnnotation> pseudo,
                                              std::span<const int> current_classes);

nlohmann::json trace_to_json(const PseudoLabelTrace& trace, std::span<const Detection> dets);

}  // namespace bpf
