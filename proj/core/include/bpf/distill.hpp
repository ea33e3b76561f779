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

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bpf/detector.hpp"
#include "bpf/geom.hpp"
#include "bpf/rng.hpp"

namespace bpf {

enum class BoxMode { kPart, kAll };

BoxMode parse_box_mode(const std::string& s);
std::string to_string(BoxMode m);

struct DistillConfig {
  double lambda2 = 0.5;
  BoxMode box_mode = BoxMode::kPart;
  int n_top = 128;
  int n_sample = 64;

  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

/// Top min(n_top, n) proposals by objectness, then min(n_sample, that) drawn
/// uniformly without replacement. `ranked` must be sorted by objectness.
std::vector<Proposal> sample_distill_regions(std::span<const Proposal> ranked, int n_top,
                                             int n_sample, Rng& rng);

std::vector<Proposal> select_distill_regions(const DetectorModel& m_old, const Scene& scene,
                                             Rng& rng, int n_top = 128, int n_sample = 64);

enum class RegionTag { kR1, kR2 };

struct RegionPartition {
  std::vector<Proposal> regions;
  std::vector<std::size_t> r1;
  std::vector<std::size_t> r2;
};

/// R1: max IoU against the ground truth <= lambda2; R2: the rest.
RegionPartition partition_regions(std::vector<Proposal> regions, std::span<const BBox> gt,
                                  double lambda2);

/// Slot layout of a student that extends an old model by the current stage:
/// [old classes, current classes, background].
struct TargetLayout {
  int num_old = 0;
  int num_current = 0;
  int size() const { return num_old + num_current + 1; }
};

struct DistillTarget {
  std::vector<double> probs;
  std::optional<BBox> target_box;
  RegionTag region_tag = RegionTag::kR1;
  bool box_in_scope = true;
};

/// Old model primary; the expert's current-class and background block is
/// rescaled by the old model's background probability.
DistillTarget compose_target_r1(const ProbVector& p_old, const ProbVector& p_im,
                                const TargetLayout& layout);

/// Expert primary; the old model's old-class and background entries are
/// rescaled by the expert's background probability.
DistillTarget compose_target_r2(const ProbVector& p_old, const ProbVector& p_im,
                                const TargetLayout& layout);

/// sum_k t_k log(t_k / s_k) with 0 log 0 = 0 and s_k floored at 1e-12.
double kl_div(std::span<const double> target, const ProbVector& student);

/// d kl_div(target, softmax(z)) / dz, respecting the floor and logit clip.
std::vector<double> kl_logit_grad(std::span<const double> target,
                                  std::span<const double> logits);

/// Biased-background cross-entropy against the old model (minimized form).
double ukd_loss(const ProbVector& p_old, const ProbVector& p_student,
                const TargetLayout& layout);

std::vector<double> ukd_logit_grad(const ProbVector& p_old, std::span<const double> logits,
                                   const TargetLayout& layout);

/// Box deltas of one region for each student class slot (old then current).
struct RegionBoxes {
  std::vector<BoxDelta> teacher_old;      // num_old, from the old model
  std::vector<BoxDelta> teacher_current;  // num_current, from the expert
  std::vector<BoxDelta> student;          // num_old + num_current
};

/// 0.5 * squared L2 summed over the classes in scope. Part mode keeps the
/// primary teacher's classes (old for R1, current for R2); all mode keeps
/// every class, each against the teacher that knows it.
double box_distill_loss(RegionTag tag, BoxMode mode, const RegionBoxes& boxes,
                        std::vector<BoxDelta>* student_grad = nullptr);

/// Whether class slot `k` of a layout takes part in box distillation.
bool box_in_scope(RegionTag tag, BoxMode mode, const TargetLayout& layout, int k);

struct DistillResult {
  double loss = 0.0;
  double cls = 0.0;
  double box = 0.0;
  std::size_t num_r1 = 0;
  std::size_t num_r2 = 0;
};

/// Distillation with two teachers over already selected regions; averages
/// over regions and accumulates gradients of m_cur into `grads`.
DistillResult dwf_loss_regions(const RoiPooler& pooler, std::span<const Proposal> regions,
                               std::span<const BBox> gt, const DetectorModel& m_old,
                               const DetectorModel& m_im, const DetectorModel& m_cur,
                               const DistillConfig& cfg, Gradients* grads);

/// Full per-scene loss: region selection from m_old, partition, composition,
/// KL and box terms.
DistillResult dwf_loss(const Scene& scene, const DetectorModel& m_old, const DetectorModel& m_im,
                       const DetectorModel& m_cur, std::span<const BBox> gt,
                       const DistillConfig& cfg, Rng& rng, Gradients* grads);

/// UKD classification term plus old-class box distillation, averaged over
/// regions.
DistillResult ukd_loss_regions(const RoiPooler& pooler, std::span<const Proposal> regions,
                               const DetectorModel& m_old, const DetectorModel& m_cur,
                               Gradients* grads);

/// Checks that m_cur's classes are m_old's followed by m_im's.
TargetLayout layout_for(const DetectorModel& m_old, const DetectorModel& m_im,
                        const DetectorModel& m_cur);
TargetLayout layout_for(const DetectorModel& m_old, const DetectorModel& m_cur);

}  // namespace bpf
