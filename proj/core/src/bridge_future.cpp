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

#include "bpf/bridge_future.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bpf/error.hpp"

namespace bpf {

AttentionMap attention_map(const FeatureGrid& features, double p_exponent) {
  if (!(p_exponent > 0.0)) throw Error("attention: p must be positive");
  AttentionMap map;
  map.p_exponent = p_exponent;
  map.grid = Grid2D(features.height, features.width);
  double mx = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < features.height; ++r) {
    for (int c = 0; c < features.width; ++c) {
      double s = 0.0;
      for (double v : features.cell(r, c)) {
        if (!std::isfinite(v)) throw Error("attention: non-finite feature");
        s += p_exponent == 2.0 ? v * v : std::pow(std::abs(v), p_exponent);
      }
      map.grid.at(r, c) = s;
      mx = std::max(mx, s);
    }
  }
  double sum = 0.0;
  for (double& v : map.grid.values) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : map.grid.values) v /= sum;
  return map;
}

void BFConfig::validate() const {
  if (!(p > 0.0)) throw ConfigError("bf.p must be positive");
  if (!(attn_pct >= 0.0 && attn_pct <= 1.0)) throw ConfigError("bf.attn_pct must lie in [0,1]");
  if (!(obj_thresh >= 0.0 && obj_thresh <= 1.0)) {
    throw ConfigError("bf.obj_thresh must lie in [0,1]");
  }
  if (!(known_iou > 0.0 && known_iou <= 1.0)) throw ConfigError("bf.known_iou must lie in (0,1]");
}

void to_json(nlohmann::json& j, const BFConfig& c) {
  j = nlohmann::json{{"p", c.p},
                     {"attn_pct", c.attn_pct},
                     {"obj_thresh", c.obj_thresh},
                     {"known_iou", c.known_iou},
                     {"use_attention", c.use_attention},
                     {"use_objectness", c.use_objectness}};
}

void from_json(const nlohmann::json& j, BFConfig& c) {
  const BFConfig d = c;
  c.p = j.value("p", d.p);
  c.attn_pct = j.value("attn_pct", d.attn_pct);
  c.obj_thresh = j.value("obj_thresh", d.obj_thresh);
  c.known_iou = j.value("known_iou", d.known_iou);
  c.use_attention = j.value("use_attention", d.use_attention);
  c.use_objectness = j.value("use_objectness", d.use_objectness);
}

double lower_quantile(std::vector<double> values, double pct) {
  if (values.empty()) return 0.0;
  const auto pos = static_cast<std::size_t>(std::floor(pct * (values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + pos, values.end());
  return values[pos];
}

std::vector<double> attention_scores(const AttentionMap& attention,
                                     std::span<const BBox> candidates) {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& b : candidates) out.push_back(region_avg(attention.grid, b));
  return out;
}

std::vector<DiscardCandidate> select_discard_set(std::span<const Proposal> proposals,
                                                 std::span<const double> scores,
                                                 std::span<const WeightedAnnotation> targets,
                                                 const BFConfig& cfg) {
  if (scores.size() != proposals.size()) {
    throw Error("select_discard_set: one attention score per proposal required");
  }
  std::vector<BBox> known;
  for (const auto& t : targets) known.push_back(t.box);
  const double attn_cut =
      lower_quantile(std::vector<double>(scores.begin(), scores.end()), cfg.attn_pct);
  const bool any_clause = cfg.use_attention || cfg.use_objectness;

  std::vector<DiscardCandidate> out;
  out.reserve(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    DiscardCandidate d{proposals[i], scores[i], false};
    const bool salient = !cfg.use_attention || scores[i] >= attn_cut;
    const bool objectlike = !cfg.use_objectness || proposals[i].objectness >= cfg.obj_thresh;
    d.discarded = any_clause && salient && objectlike &&
                  max_iou(proposals[i].box, known) < cfg.known_iou;
    out.push_back(d);
  }
  return out;
}

std::vector<DiscardCandidate> select_discard_set(std::span<const Proposal> proposals,
                                                 const AttentionMap& attention,
                                                 std::span<const WeightedAnnotation> targets,
                                                 const BFConfig& cfg) {
  std::vector<double> scores;
  scores.reserve(proposals.size());
  for (const auto& p : proposals) scores.push_back(region_avg(attention.grid, p.box));
  return select_discard_set(proposals, scores, targets, cfg);
}

std::vector<bool> discard_mask(std::span<const DiscardCandidate> discard,
                               std::size_t num_candidates) {
  std::vector<bool> mask(num_candidates, false);
  for (const auto& d : discard) {
    if (!d.discarded) continue;
    if (d.proposal.index >= num_candidates) throw Error("discard_mask: index out of range");
    mask[d.proposal.index] = true;
  }
  return mask;
}

NegativeSample sample_negatives(const ScenePlan& plan,
                                std::span<const DiscardCandidate> discard, Rng& rng,
                                std::size_t count, double negative_iou,
                                std::span<const std::size_t> pool) {
  const auto mask = discard_mask(discard, plan.boxes.size());
  NegativeSample out;
  out.indices = sample_negative_band(plan, negative_iou, mask, count, rng, pool);
  out.exhausted = out.indices.empty() && count > 0;
  return out;
}

std::string attention_pgm(const AttentionMap& attention) {
  const auto& g = attention.grid;
  const double mx = *std::max_element(g.values.begin(), g.values.end());
  std::ostringstream os;
  os << "P5\n" << g.width << ' ' << g.height << "\n255\n";
  for (double v : g.values) {
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v / mx))));
  }
  return os.str();
}

}  // namespace bpf
