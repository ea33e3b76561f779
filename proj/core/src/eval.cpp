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

#include "bpf/eval.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "bpf/error.hpp"
#include "bpf/parallel.hpp"

namespace bpf {

Interp parse_interp(const std::string& s) {
  if (s == "all") return Interp::kAllPoint;
  if (s == "eleven") return Interp::kElevenPoint;
  throw ConfigError("eval.interp must be 'all' or 'eleven', got '" + s + "'");
}

std::string to_string(Interp i) { return i == Interp::kAllPoint ? "all" : "eleven"; }

void EvalConfig::validate() const {
  if (!(iou > 0.0 && iou <= 1.0)) throw ConfigError("eval.iou must lie in (0,1]");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw ConfigError("eval.nms_iou must lie in (0,1]");
  if (min_score < 0.0 || max_per_class <= 0) throw ConfigError("eval: invalid detection limits");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"interp", to_string(c.interp)},
                     {"iou", c.iou},
                     {"min_score", c.min_score},
                     {"nms_iou", c.nms_iou},
                     {"max_per_class", c.max_per_class}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  const EvalConfig d = c;
  c.interp = parse_interp(j.value("interp", to_string(d.interp)));
  c.iou = j.value("iou", d.iou);
  c.min_score = j.value("min_score", d.min_score);
  c.nms_iou = j.value("nms_iou", d.nms_iou);
  c.max_per_class = j.value("max_per_class", d.max_per_class);
}

MatchResult match_detections(std::span<const ScoredDetection> dets,
                             const std::vector<std::vector<BBox>>& gts, double iou_thresh) {
  MatchResult m;
  m.order.resize(dets.size());
  std::iota(m.order.begin(), m.order.end(), std::size_t{0});
  std::stable_sort(m.order.begin(), m.order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  m.gt_matched.resize(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) m.gt_matched[s].assign(gts[s].size(), false);

  for (std::size_t i : m.order) {
    const auto& d = dets[i];
    if (d.scene >= gts.size()) throw Error("match: detection scene out of range");
    const auto& g = gts[d.scene];
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double v = iou(d.box, g[k]);
      if (v > best) {
        best = v;
        best_g = k;
      }
    }
    const bool tp = best >= iou_thresh && !m.gt_matched[d.scene][best_g];
    if (tp) m.gt_matched[d.scene][best_g] = true;
    m.true_positive.push_back(tp);
  }
  return m;
}

std::optional<double> average_precision(std::span<const ScoredDetection> dets,
                                        const std::vector<std::vector<BBox>>& gts,
                                        double iou_thresh, Interp interp) {
  std::size_t n_gt = 0;
  for (const auto& g : gts) n_gt += g.size();
  if (n_gt == 0) return std::nullopt;

  const MatchResult m = match_detections(dets, gts, iou_thresh);
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < m.true_positive.size(); ++i) {
    if (m.true_positive[i]) ++tp;
    recall.push_back(static_cast<double>(tp) / n_gt);
    precision.push_back(static_cast<double>(tp) / (i + 1));
  }

  if (interp == Interp::kElevenPoint) {
    double ap = 0.0;
    for (int step = 0; step <= 10; ++step) {
      const double r = step / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] >= r - 1e-12) p = std::max(p, precision[i]);
      }
      ap += p / 11.0;
    }
    return ap;
  }

  // Precision envelope, integrated over the recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

MapReport map_report(const std::map<int, std::optional<double>>& ap,
                     const ClassRegistry& registry, int stage) {
  MapReport r;
  auto mean_of = [&](const std::vector<int>& classes) -> std::optional<double> {
    double sum = 0.0;
    int n = 0;
    for (int c : classes) {
      const auto it = ap.find(c);
      if (it == ap.end() || !it->second) continue;
      sum += *it->second;
      ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
  };
  for (const auto& [c, v] : ap) {
    if (v) {
      r.per_class[c] = *v;
    } else {
      r.undefined.push_back(c);
    }
  }
  const auto all = mean_of(registry.classes_through(stage));
  r.all_map = all.value_or(0.0);
  r.new_map = mean_of(registry.stage(stage));
  if (stage > 0) r.old_map = mean_of(registry.past(stage));
  if (r.old_map && r.new_map) {
    r.avg = 0.5 * (*r.old_map + *r.new_map);
  } else {
    r.avg = r.all_map;
  }
  return r;
}

void to_json(nlohmann::json& j, const MapReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class) per[std::to_string(c)] = v;
  j = nlohmann::json{{"per_class_ap", per},
                     {"undefined_classes", r.undefined},
                     {"old_map", r.old_map ? nlohmann::json(*r.old_map) : nlohmann::json()},
                     {"new_map", r.new_map ? nlohmann::json(*r.new_map) : nlohmann::json()},
                     {"all_map", r.all_map},
                     {"avg", r.avg}};
}

double RecallCounts::value() const {
  if (total == 0) throw Error("undefined recall");
  return static_cast<double>(covered) / static_cast<double>(total);
}

RecallCounts recall_counts(std::span<const BBox> boxes, std::span<const BBox> gts,
                           double iou_thresh) {
  RecallCounts rc;
  rc.total = gts.size();
  for (const auto& g : gts) {
    if (std::any_of(boxes.begin(), boxes.end(),
                    [&](const BBox& b) { return iou(b, g) >= iou_thresh; })) {
      ++rc.covered;
    }
  }
  return rc;
}

double recall_at_iou(std::span<const BBox> boxes, std::span<const BBox> gts, double iou_thresh) {
  return recall_counts(boxes, gts, iou_thresh).value();
}

std::map<int, std::vector<ScoredBox>> detect(const DetectorModel& model, const Scene& scene,
                                             const EvalConfig& cfg) {
  const auto candidates =
      candidate_boxes(model.proposals, scene.features.height, scene.features.width);
  const RoiPooler pooler(scene.features, model.proposals.ring_width);
  const BBox extent = scene.extent();
  std::vector<std::vector<ScoredBox>> per_slot(model.num_classes());
  const auto ranked = propose(model, pooler, candidates);
  const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(model.proposals.top_n));
  for (std::size_t r = 0; r < n; ++r) {
    const BBox& cand = ranked[r].box;
    const auto feat = pooler.feature(cand);
    const ProbVector p = classify(model, feat);
    for (int k = 0; k < model.num_classes(); ++k) {
      if (p[k] < cfg.min_score) continue;
      const BBox box = clamp_to(apply_delta(cand, regress_index(model, feat, k)), extent);
      if (box.degenerate()) continue;
      per_slot[k].push_back({box, p[k], model.classes[k]});
    }
  }
  std::map<int, std::vector<ScoredBox>> out;
  for (int k = 0; k < model.num_classes(); ++k) {
    auto kept = nms(per_slot[k], cfg.nms_iou);
    if (kept.size() > static_cast<std::size_t>(cfg.max_per_class)) kept.resize(cfg.max_per_class);
    out[model.classes[k]] = std::move(kept);
  }
  return out;
}

MapReport evaluate(const DetectorModel& model, const StageDataset& test,
                   const ClassRegistry& registry, int stage, const EvalConfig& cfg) {
  cfg.validate();
  const std::size_t n = test.scenes.size();
  std::vector<std::map<int, std::vector<ScoredBox>>> per_scene(n);
  parallel_for(n, [&](std::size_t i) { per_scene[i] = detect(model, test.scenes[i], cfg); });

  std::map<int, std::optional<double>> ap;
  for (int c : registry.classes_through(stage)) {
    std::vector<ScoredDetection> dets;
    std::vector<std::vector<BBox>> gts(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& o : test.visible[i]) {
        if (o.class_id == c) gts[i].push_back(o.box);
      }
      const auto it = per_scene[i].find(c);
      if (it == per_scene[i].end()) continue;
      for (const auto& d : it->second) dets.push_back({i, d.box, d.score});
    }
    ap[c] = average_precision(dets, gts, cfg.iou, cfg.interp);
  }
  return map_report(ap, registry, stage);
}

}  // namespace bpf
