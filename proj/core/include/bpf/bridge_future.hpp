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
#include "bpf/geom.hpp"

namespace bpf {

/// Spatial softmax of per-cell activation energy; sums to 1.
struct AttentionMap {
  Grid2D grid;
  double p_exponent = 2.0;
};

/// Throws bpf::Error on non-finite features or a non-positive exponent.
AttentionMap attention_map(const FeatureGrid& features, double p_exponent);

struct BFConfig {
  double p = 2.0;
  /// Per-scene attention quantile a proposal must reach.
  double attn_pct = 0.8;
  double obj_thresh = 0.5;
  double known_iou = 0.5;
  bool use_attention = true;
  bool use_objectness = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const BFConfig& c);
void from_json(const nlohmann::json& j, BFConfig& c);

struct DiscardCandidate {
  Proposal proposal;
  double attention_score = 0.0;
  bool discarded = false;
};

/// Quantile `pct` of `values` (nearest rank, lower): the element at position
/// floor(pct * (n - 1)) of the ascending order.
double lower_quantile(std::vector<double> values, double pct);

/// Marks proposals that look like unlabeled objects: high attention, high
/// objectness and low overlap with the known targets. With both saliency
/// clauses disabled nothing is discarded.
std::vector<DiscardCandidate> select_discard_set(std::span<const Proposal> proposals,
                                                 const AttentionMap& attention,
                                                 std::span<const WeightedAnnotation> targets,
                                                 const BFConfig& cfg);

/// Same, with attention scores already pooled per proposal.
std::vector<DiscardCandidate> select_discard_set(std::span<const Proposal> proposals,
                                                 std::span<const double> attention_scores,
                                                 std::span<const WeightedAnnotation> targets,
                                                 const BFConfig& cfg);

/// Pooled attention for every candidate box, in candidate order.
std::vector<double> attention_scores(const AttentionMap& attention,
                                     std::span<const BBox> candidates);

struct NegativeSample {
  std::vector<std::size_t> indices;
  /// Set when no eligible negative remained after exclusion.
  bool exhausted = false;
};

/// Exclusion mask over candidate indices from a discard set.
std::vector<bool> discard_mask(std::span<const DiscardCandidate> discard,
                               std::size_t num_candidates);

/// Negative-band sampling with every discarded candidate removed first.
NegativeSample sample_negatives(const ScenePlan& plan,
                                std::span<const DiscardCandidate> discard, Rng& rng,
                                std::size_t count, double negative_iou,
                                std::span<const std::size_t> pool = {});

/// Binary PGM (P5) rendering of an attention map scaled to its max.
std::string attention_pgm(const AttentionMap& attention);

}  // namespace bpf
