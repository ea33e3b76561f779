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

#include "bpf/bridge_past.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "bpf/error.hpp"

namespace bpf {

void BPConfig::validate() const {
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("bp.eta must lie in (0,1)");
  if (!(lambda1 > 0.0 && lambda1 < 1.0)) throw ConfigError("bp.lambda1 must lie in (0,1)");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw ConfigError("bp.nms_iou must lie in (0,1]");
  if (!(high_weight >= low_weight && low_weight > 0.0)) {
    throw ConfigError("bp weights must satisfy high_weight >= low_weight > 0");
  }
  if (high_weight > 1.0) throw ConfigError("bp.high_weight must not exceed 1");
}

void to_json(nlohmann::json& j, const BPConfig& c) {
  j = nlohmann::json{{"eta", c.eta},
                     {"lambda1", c.lambda1},
                     {"nms_iou", c.nms_iou},
                     {"weight_split_iou", c.weight_split_iou},
                     {"high_weight", c.high_weight},
                     {"low_weight", c.low_weight}};
}

void from_json(const nlohmann::json& j, BPConfig& c) {
  const BPConfig d = c;
  c.eta = j.value("eta", d.eta);
  c.lambda1 = j.value("lambda1", d.lambda1);
  c.nms_iou = j.value("nms_iou", d.nms_iou);
  c.weight_split_iou = j.value("weight_split_iou", d.weight_split_iou);
  c.high_weight = j.value("high_weight", d.high_weight);
  c.low_weight = j.value("low_weight", d.low_weight);
}

std::vector<Detection> predict_old(const DetectorModel& m_old, const RoiPooler& pooler,
                                   std::span<const BBox> candidates, const BBox& extent) {
  auto ranked = propose(m_old, pooler, candidates);
  ranked.resize(std::min(ranked.size(), static_cast<std::size_t>(m_old.proposals.top_n)));
  std::vector<Detection> out;
  out.reserve(ranked.size());
  for (const Proposal& prop : ranked) {
    const auto feat = pooler.feature(prop.box);
    Detection d;
    d.probs = classify(m_old, feat);
    d.proposal = prop;
    const auto best = std::max_element(d.probs.probs.begin(), d.probs.probs.end() - 1);
    const int k = static_cast<int>(best - d.probs.probs.begin());
    d.box = clamp_to(apply_delta(prop.box, regress_index(m_old, feat, k)), extent);
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Detection> predict_old(const DetectorModel& m_old, const Scene& scene) {
  const auto candidates =
      candidate_boxes(m_old.proposals, scene.features.height, scene.features.width);
  return predict_old(m_old, RoiPooler(scene.features, m_old.proposals.ring_width), candidates,
                     scene.extent());
}

std::string to_string(DropReason r) {
  switch (r) {
    case DropReason::kKept: return "kept";
    case DropReason::kBelowThreshold: return "below_threshold";
    case DropReason::kSuppressed: return "nms";
    case DropReason::kOverlapsGroundTruth: return "gt_overlap";
  }
  return "unknown";
}

std::vector<WeightedAnnotation> select_pseudo_labels(std::span<const Detection> dets,
                                                     std::span<const int> old_classes,
                                                     std::span<const WeightedAnnotation> gt,
                                                     const BPConfig& cfg,
                                                     PseudoLabelTrace* trace) {
  // (i) confidence gate over old classes only.
  std::vector<std::size_t> passing;
  std::vector<ScoredBox> pool;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& p = dets[i].probs.probs;
    if (p.size() != old_classes.size() + 1) {
      throw Error("select_pseudo_labels: probability length does not match old classes");
    }
    const auto best = std::max_element(p.begin(), p.end() - 1);
    if (*best > cfg.eta) {
      passing.push_back(i);
      pool.push_back({dets[i].box, *best, old_classes[best - p.begin()]});
    } else if (trace) {
      ++trace->below_threshold;
    }
  }

  std::vector<BBox> gt_boxes;
  for (const auto& g : gt) gt_boxes.push_back(g.box);

  const auto kept = nms_indices(pool, cfg.nms_iou);
  std::vector<bool> survived(pool.size(), false);
  for (std::size_t k : kept) survived[k] = true;

  std::vector<WeightedAnnotation> out;
  if (trace) {
    for (std::size_t k = 0; k < pool.size(); ++k) {
      if (!survived[k]) {
        trace->entries.push_back({passing[k], *pool[k].class_id, pool[k].score,
                                  max_iou(pool[k].box, gt_boxes), DropReason::kSuppressed, 0.0});
      }
    }
  }
  for (std::size_t k : kept) {
    const double gt_iou = max_iou(pool[k].box, gt_boxes);
    DropReason reason = DropReason::kKept;
    double weight = 0.0;
    // (iii) every ground-truth IoU must stay <= lambda1.
    if (gt_iou > cfg.lambda1) {
      reason = DropReason::kOverlapsGroundTruth;
    } else {
      // (iv) two weight levels split by IoU against the ground truth.
      weight = gt_iou < cfg.weight_split_iou ? cfg.high_weight : cfg.low_weight;
      out.push_back({pool[k].box, *pool[k].class_id, weight, Origin::kPseudo});
    }
    if (trace) {
      trace->entries.push_back({passing[k], *pool[k].class_id, pool[k].score, gt_iou, reason,
                                weight});
    }
  }
  return out;
}

std::vector<WeightedAnnotation> merge_targets(std::span<const WeightedAnnotation> gt,
                                              std::span<const WeightedAnnotation> pseudo,
                                              std::span<const int> current_classes) {
  std::vector<WeightedAnnotation> out(gt.begin(), gt.end());
  for (const auto& p : pseudo) {
    if (std::find(current_classes.begin(), current_classes.end(), p.class_id) !=
        current_classes.end()) {
      throw Error("stage violation");
    }
    out.push_back(p);
  }
  return out;
}

nlohmann::json trace_to_json(const PseudoLabelTrace& trace, std::span<const Detection> dets) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : trace.entries) {
    const BBox& b = dets[e.detection].box;
    entries.push_back({{"detection", e.detection},
                       {"box", {b.x_min, b.y_min, b.x_max, b.y_max}},
                       {"class_id", e.class_id},
                       {"score", e.score},
                       {"gt_iou", e.gt_iou},
                       {"status", to_string(e.reason)},
                       {"weight", e.weight}});
  }
  return {{"num_detections", dets.size()},
          {"below_threshold", trace.below_threshold},
          {"gated", std::move(entries)}};
}

}  // namespace bpf
