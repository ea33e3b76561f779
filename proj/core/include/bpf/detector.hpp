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

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bpf/annotation.hpp"
#include "bpf/geom.hpp"
#include "bpf/rng.hpp"
#include "bpf/synth.hpp"

namespace bpf {

/// Logits are clipped to this magnitude before exponentiation.
inline constexpr double kLogitClip = 50.0;
inline constexpr double kProbFloor = 1e-12;

/// Dense row-major matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }

  bool operator==(const Matrix&) const = default;
};

double dot(std::span<const double> a, std::span<const double> b);

/// Class distribution; the last entry is background.
struct ProbVector {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double background() const { return probs.back(); }
  double operator[](std::size_t i) const { return probs[i]; }
  bool normalized(double tol = 1e-9) const;
};

/// Numerically stable softmax over clipped logits.
ProbVector softmax(std::span<const double> logits);

/// Box refinement in center / log-size parameterization.
struct BoxDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  std::array<double, 4> as_array() const { return {dx, dy, dw, dh}; }
  bool operator==(const BoxDelta&) const = default;
};

BoxDelta encode_delta(const BBox& from, const BBox& to);
BBox apply_delta(const BBox& box, const BoxDelta& delta);
BBox clamp_to(const BBox& box, const BBox& extent);

struct ProposalConfig {
  std::vector<int> window_sizes{6, 8, 10, 12};
  int stride = 2;
  /// Width of the context ring pooled around each box.
  double ring_width = 2.0;
  /// Highest-objectness proposals handed to the RoI head.
  int top_n = 300;

  bool operator==(const ProposalConfig&) const = default;
};

/// Sliding-window candidates over an H x W extent; independent of content.
std::vector<BBox> candidate_boxes(const ProposalConfig& cfg, int height, int width);

/// RoI feature length for a C-channel grid: [inside mean (C), ring mean (C),
/// inside energy, ring energy, right-left and bottom-top energy differences
/// of the box halves and of the ring strips, edge profiles, inverse width and
/// height, bias]. Energies are relative to the scene mean cell energy. The
/// edge profiles project the mean of each one-cell strip at offsets
/// [-kEdgeReach, kEdgeReach) across each edge onto the inside mean, divided by
/// its squared norm and by the box extent normal to the edge in strip units.
inline constexpr int kEdgeReach = 3;
inline int roi_feature_dim(int channels) { return 2 * channels + 9 + 8 * kEdgeReach; }

/// Summed-area table over a feature grid for O(C) box pooling.
class RoiPooler {
 public:
  RoiPooler(const FeatureGrid& grid, double ring_width);

  /// Throws bpf::Error("empty region") when `box` covers no cell center.
  std::vector<double> feature(const BBox& box) const;
  /// Same as feature() into a caller buffer of length dim().
  void feature_into(const BBox& box, std::span<double> out) const;
  int dim() const { return roi_feature_dim(channels_); }

 private:
  int stride() const { return channels_ + 1; }
  std::size_t offset(int row, int col) const;
  double corner_sum(const CellRange& r, int ch) const;
  double mean_energy(const BBox& box) const;
  double projected_mean(const BBox& box, std::span<const double> dir) const;

  int height_;
  int width_;
  int channels_;
  double ring_width_;
  std::vector<double> table_;  // (H+1) x (W+1) x (C+1), energy last
};

std::vector<double> roi_feature(const Scene& scene, const BBox& box,
                                double ring_width = ProposalConfig{}.ring_width);

struct Proposal {
  BBox box;
  double objectness = 0.0;
  /// Position in the candidate enumeration.
  std::size_t index = 0;
};

/// Linear softmax RoI classifier, per-class linear box regressor and a linear
/// logistic objectness head over shared RoI features.
struct DetectorModel {
  ClassRegistry registry;
  /// Known classes; probability slot k maps to classes[k], background last.
  std::vector<int> classes;
  int feature_dim = 0;
  Matrix cls;                  // (K + 1) x D
  Matrix reg;                  // 4K x D, rows 4k..4k+3 regress class k
  std::vector<double> obj;     // D
  double proposal_threshold = 0.5;
  ProposalConfig proposals;
  int trained_through_stage = -1;

  static DetectorModel zeros(const ClassRegistry& registry, std::vector<int> classes,
                             int feature_dim, const ProposalConfig& proposals = {});

  int num_classes() const { return static_cast<int>(classes.size()); }
  int background_index() const { return num_classes(); }
  /// Probability slot of `class_id`, or -1.
  int index_of(int class_id) const;

  bool operator==(const DetectorModel&) const = default;
};

/// Pooled features of every candidate window of one scene, row-major.
class CandidateFeatures {
 public:
  CandidateFeatures(const RoiPooler& pooler, std::span<const BBox> candidates);

  std::size_t size() const { return boxes_.size(); }
  int dim() const { return dim_; }
  const std::vector<BBox>& boxes() const { return boxes_; }
  std::span<const double> operator[](std::size_t i) const {
    return {data_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
  }

 private:
  std::vector<BBox> boxes_;
  int dim_ = 0;
  std::vector<double> data_;
};

/// All candidates scored by objectness, sorted descending (ties by index).
std::vector<Proposal> propose(const DetectorModel& model, const Scene& scene);
/// With `limit`, only the `limit` highest-objectness proposals are returned,
/// identical to the prefix of the full ranking.
std::vector<Proposal> propose(const DetectorModel& model, const CandidateFeatures& features,
                              std::size_t limit = std::numeric_limits<std::size_t>::max());
std::vector<Proposal> propose(const DetectorModel& model, const RoiPooler& pooler,
                              std::span<const BBox> candidates);

double objectness(const DetectorModel& model, std::span<const double> feat);
std::vector<double> logits(const DetectorModel& model, std::span<const double> feat);
ProbVector classify(const DetectorModel& model, std::span<const double> feat);
/// Throws bpf::Error for a class the model does not know.
BoxDelta regress(const DetectorModel& model, std::span<const double> feat, int class_id);
BoxDelta regress_index(const DetectorModel& model, std::span<const double> feat, int k);

struct Detection {
  BBox box;
  ProbVector probs;
  Proposal proposal;
};

/// Gradient buffers shaped like a model's trainable parameters.
struct Gradients {
  Matrix cls;
  Matrix reg;
  std::vector<double> obj;

  static Gradients like(const DetectorModel& model);
  void add(const Gradients& other, double scale = 1.0);
  bool all_finite() const;
  double max_abs() const;
};

/// One sampled RoI for the supervised heads.
struct RoiSample {
  std::vector<double> feat;
  /// Probability slot of the target (background_index() for negatives).
  int target = 0;
  double weight = 1.0;
  std::optional<BoxDelta> box_target;
};

struct ObjectnessSample {
  std::vector<double> feat;
  bool positive = false;
};

struct LossBreakdown {
  double cls = 0.0;
  double box = 0.0;
  double objectness = 0.0;
  double total() const { return cls + box + objectness; }
};

/// Weighted cross-entropy + beta-weighted L2 box loss (averaged over RoIs)
/// plus logistic objectness loss (averaged over its samples), with analytic
/// gradients. Throws bpf::Error for a negative weight.
LossBreakdown loss_and_grads(const DetectorModel& model, std::span<const RoiSample> rois,
                             std::span<const ObjectnessSample> obj_samples, double beta,
                             Gradients* grads);

/// W <- W - lr * grad. Throws bpf::Error("divergence") for non-finite gradients.
void sgd_step(DetectorModel& model, const Gradients& grads, double lr);

enum class LrSchedule { kConstant, kCosine };

LrSchedule parse_lr_schedule(const std::string& s);
std::string to_string(LrSchedule s);

struct TrainConfig {
  int epochs = 30;
  double lr = 0.1;
  /// Cosine anneals lr towards zero over the epochs of each training run.
  LrSchedule schedule = LrSchedule::kConstant;
  int rois_per_scene = 32;
  double positive_fraction = 0.25;
  double positive_iou = 0.5;
  double negative_iou = 0.3;
  int objectness_samples = 32;
  double box_weight = 1.0;
  ProposalConfig proposals;

  void validate() const;
  /// Step size used during `epoch`.
  double lr_at(int epoch) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Candidate windows of a scene together with their IoU bookkeeping against
/// a target list.
struct ScenePlan {
  std::vector<BBox> boxes;
  std::vector<double> max_iou;
  std::vector<int> argmax;  // target index, -1 when no targets
};

ScenePlan plan_scene(std::span<const BBox> candidates,
                     std::span<const WeightedAnnotation> targets);

/// Positives: candidates (and the target boxes themselves) with IoU >= pos_iou.
/// Returns up to `max_count` entries drawn without replacement; each entry is
/// (box, target index).
std::vector<std::pair<BBox, int>> sample_positives(const ScenePlan& plan,
                                                   std::span<const WeightedAnnotation> targets,
                                                   double pos_iou, std::size_t max_count,
                                                   Rng& rng);

/// Candidate indices in the negative band (IoU < neg_iou) minus `excluded`,
/// sampled without replacement from `pool` (every candidate when empty).
std::vector<std::size_t> sample_negative_band(const ScenePlan& plan, double neg_iou,
                                              const std::vector<bool>& excluded,
                                              std::size_t count, Rng& rng,
                                              std::span<const std::size_t> pool = {});

/// Candidate indices of the first `top_n` ranked proposals.
std::vector<std::size_t> proposal_pool(std::span<const Proposal> ranked, int top_n);

/// Supervised RoI and objectness samples of one scene visit. RoI negatives come
/// from the model's top proposals; `ranked` is recomputed when empty.
struct SupervisedBatch {
  std::vector<RoiSample> rois;
  std::vector<ObjectnessSample> objectness;
  std::vector<std::size_t> negative_indices;
};

SupervisedBatch build_supervised_batch(const DetectorModel& model, const RoiPooler& pooler,
                                       const ScenePlan& plan,
                                       std::span<const WeightedAnnotation> targets,
                                       const std::vector<bool>& excluded, const TrainConfig& cfg,
                                       Rng& rng, std::span<const Proposal> ranked = {});

/// Scenes paired with the annotations to train on.
struct TrainingSet {
  std::vector<const Scene*> scenes;
  std::vector<std::vector<WeightedAnnotation>> targets;
};

TrainingSet training_set(const StageDataset& ds);

/// Visit order of one epoch, a function of scene ids only.
std::vector<std::size_t> epoch_order(const TrainingSet& set, std::uint64_t seed, int epoch);

std::uint64_t scene_stream(std::uint64_t seed, std::uint64_t scene_id, int epoch,
                           std::uint64_t tag);

/// Fully supervised training from zero weights over `classes`.
/// Throws bpf::Error for an empty set or annotations outside `classes`.
DetectorModel train_supervised(const TrainingSet& set, const ClassRegistry& registry,
                               const std::vector<int>& classes, const TrainConfig& cfg,
                               std::uint64_t seed, double* final_loss = nullptr);

void to_json(nlohmann::json& j, const DetectorModel& m);
void from_json(const nlohmann::json& j, DetectorModel& m);

}  // namespace bpf
