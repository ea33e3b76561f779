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

#include "bpf/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>

#include "bpf/error.hpp"
#include "bpf/parallel.hpp"

namespace bpf {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kMaxLogScale = 4.0;
/// Floor on the squared inside mean norm when normalizing edge profiles.
constexpr double kEdgeContrast = 0.05;
constexpr std::uint64_t kSupervisedTag = 0x737570ULL;

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  double s[4] = {0.0, 0.0, 0.0, 0.0};
  const std::size_t n = a.size(), n4 = n - n % 4;
  for (std::size_t i = 0; i < n4; i += 4) {
    s[0] += a[i] * b[i];
    s[1] += a[i + 1] * b[i + 1];
    s[2] += a[i + 2] * b[i + 2];
    s[3] += a[i + 3] * b[i + 3];
  }
  for (std::size_t i = n4; i < n; ++i) s[0] += a[i] * b[i];
  return (s[0] + s[1]) + (s[2] + s[3]);
}

bool ProbVector::normalized(double tol) const {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) return false;
    sum += p;
  }
  return std::abs(sum - 1.0) <= tol;
}

ProbVector softmax(std::span<const double> logits) {
  ProbVector out;
  out.probs.resize(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, std::clamp(z, -kLogitClip, kLogitClip));
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out.probs[k] = std::exp(std::clamp(logits[k], -kLogitClip, kLogitClip) - mx);
    sum += out.probs[k];
  }
  for (double& p : out.probs) p /= sum;
  return out;
}

BoxDelta encode_delta(const BBox& from, const BBox& to) {
  const double pw = from.width(), ph = from.height();
  const double gw = to.width(), gh = to.height();
  if (pw <= 0.0 || ph <= 0.0 || gw <= 0.0 || gh <= 0.0) {
    throw Error("encode_delta: degenerate box");
  }
  return {((to.x_min + 0.5 * gw) - (from.x_min + 0.5 * pw)) / pw,
          ((to.y_min + 0.5 * gh) - (from.y_min + 0.5 * ph)) / ph, std::log(gw / pw),
          std::log(gh / ph)};
}

BBox apply_delta(const BBox& box, const BoxDelta& d) {
  const double pw = box.width(), ph = box.height();
  const double cx = box.x_min + 0.5 * pw + d.dx * pw;
  const double cy = box.y_min + 0.5 * ph + d.dy * ph;
  const double w = pw * std::exp(std::clamp(d.dw, -kMaxLogScale, kMaxLogScale));
  const double h = ph * std::exp(std::clamp(d.dh, -kMaxLogScale, kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

BBox clamp_to(const BBox& b, const BBox& e) {
  BBox out{std::clamp(b.x_min, e.x_min, e.x_max), std::clamp(b.y_min, e.y_min, e.y_max),
           std::clamp(b.x_max, e.x_min, e.x_max), std::clamp(b.y_max, e.y_min, e.y_max)};
  return out;
}

std::vector<BBox> candidate_boxes(const ProposalConfig& cfg, int height, int width) {
  if (cfg.stride <= 0) throw ConfigError("proposals: stride must be positive");
  std::vector<BBox> out;
  for (int h : cfg.window_sizes) {
    for (int w : cfg.window_sizes) {
      if (w <= 0 || h <= 0) throw ConfigError("proposals: window sizes must be positive");
      if (w > width || h > height) continue;
      for (int y = 0; y + h <= height; y += cfg.stride) {
        for (int x = 0; x + w <= width; x += cfg.stride) {
          out.push_back({static_cast<double>(x), static_cast<double>(y),
                         static_cast<double>(x + w), static_cast<double>(y + h)});
        }
      }
    }
  }
  return out;
}

RoiPooler::RoiPooler(const FeatureGrid& grid, double ring_width)
    : height_(grid.height), width_(grid.width), channels_(grid.channels),
      ring_width_(ring_width),
      table_(static_cast<std::size_t>(grid.height + 1) * (grid.width + 1) * stride(), 0.0) {
  // Cell energy is divided by the scene mean so energy features stay near 1
  // on background whatever the noise level.
  double total = 0.0;
  for (double v : grid.data) total += v * v;
  const double cells = static_cast<double>(height_) * width_;
  const double inv_mean = total > 0.0 ? cells / total : 0.0;
  const int k = stride();
  for (int r = 0; r < height_; ++r) {
    for (int c = 0; c < width_; ++c) {
      const auto cell = grid.cell(r, c);
      const std::size_t here = offset(r + 1, c + 1), up = offset(r, c + 1),
                        left = offset(r + 1, c), diag = offset(r, c);
      double energy = 0.0;
      for (int ch = 0; ch < k; ++ch) {
        double v = 0.0;
        if (ch < channels_) {
          v = cell[ch];
          energy += v * v;
        } else {
          v = energy * inv_mean;
        }
        table_[here + ch] = v + table_[up + ch] + table_[left + ch] - table_[diag + ch];
      }
    }
  }
}

std::size_t RoiPooler::offset(int row, int col) const {
  return (static_cast<std::size_t>(row) * (width_ + 1) + col) * stride();
}

double RoiPooler::corner_sum(const CellRange& r, int ch) const {
  return table_[offset(r.row_end, r.col_end) + ch] - table_[offset(r.row_begin, r.col_end) + ch] -
         table_[offset(r.row_end, r.col_begin) + ch] + table_[offset(r.row_begin, r.col_begin) + ch];
}

std::vector<double> RoiPooler::feature(const BBox& box) const {
  std::vector<double> f(dim(), 0.0);
  feature_into(box, f);
  return f;
}

void RoiPooler::feature_into(const BBox& box, std::span<double> f) const {
  if (static_cast<int>(f.size()) != dim()) throw Error("feature_into: buffer size mismatch");
  const CellRange inner = cells_in(box, height_, width_);
  const int in_cells = inner.count();
  if (in_cells == 0) throw Error("empty region");
  const BBox grown{box.x_min - ring_width_, box.y_min - ring_width_, box.x_max + ring_width_,
                   box.y_max + ring_width_};
  const CellRange outer = cells_in(grown, height_, width_);
  const int ring_cells = outer.count() - in_cells;

  std::fill(f.begin(), f.end(), 0.0);
  for (int ch = 0; ch <= channels_; ++ch) {
    const double in = corner_sum(inner, ch);
    const int slot = ch < channels_ ? ch : 2 * channels_;
    f[slot] = in / in_cells;
    if (ring_cells > 0) {
      f[ch < channels_ ? channels_ + ch : 2 * channels_ + 1] =
          (corner_sum(outer, ch) - in) / ring_cells;
    }
  }
  const double cx = 0.5 * (box.x_min + box.x_max), cy = 0.5 * (box.y_min + box.y_max);
  const double rw = ring_width_;
  const BBox parts[] = {
      {box.x_min, box.y_min, cx, box.y_max},      {cx, box.y_min, box.x_max, box.y_max},
      {box.x_min, box.y_min, box.x_max, cy},      {box.x_min, cy, box.x_max, box.y_max},
      {box.x_min - rw, box.y_min, box.x_min, box.y_max},
      {box.x_max, box.y_min, box.x_max + rw, box.y_max},
      {box.x_min, box.y_min - rw, box.x_max, box.y_min},
      {box.x_min, box.y_max, box.x_max, box.y_max + rw},
  };
  for (int i = 0; i < 4; ++i) {
    f[2 * channels_ + 2 + i] = mean_energy(parts[2 * i + 1]) - mean_energy(parts[2 * i]);
  }
  // Edge profiles: strip means projected on the inside mean direction.
  double norm2 = 0.0;
  for (int ch = 0; ch < channels_; ++ch) norm2 += f[ch] * f[ch];
  const double inv_norm2 = 1.0 / std::max(norm2, kEdgeContrast);
  const double inv_w = 2.0 * kEdgeReach / box.width();
  const double inv_h = 2.0 * kEdgeReach / box.height();
  std::size_t slot = 2 * channels_ + 6;
  for (int k = -kEdgeReach; k < kEdgeReach; ++k) {
    const double lo_x = box.x_min + k, hi_x = box.x_max + k;
    const double lo_y = box.y_min + k, hi_y = box.y_max + k;
    const BBox strips[] = {{lo_x, box.y_min, lo_x + 1.0, box.y_max},
                           {hi_x - 1.0, box.y_min, hi_x, box.y_max},
                           {box.x_min, lo_y, box.x_max, lo_y + 1.0},
                           {box.x_min, hi_y - 1.0, box.x_max, hi_y}};
    for (int e = 0; e < 4; ++e) {
      f[slot++] = (e < 2 ? inv_w : inv_h) * inv_norm2 * projected_mean(strips[e], f);
    }
  }
  f[slot++] = inv_w;
  f[slot++] = inv_h;
  f[slot] = 1.0;
}

double RoiPooler::projected_mean(const BBox& box, std::span<const double> dir) const {
  const CellRange r = cells_in(box, height_, width_);
  const int n = r.count();
  if (n == 0) return 0.0;
  double acc = 0.0;
  for (int ch = 0; ch < channels_; ++ch) acc += corner_sum(r, ch) * dir[ch];
  return acc / n;
}

double RoiPooler::mean_energy(const BBox& box) const {
  const CellRange r = cells_in(box, height_, width_);
  const int n = r.count();
  return n > 0 ? corner_sum(r, channels_) / n : 0.0;
}

std::vector<double> roi_feature(const Scene& scene, const BBox& box, double ring_width) {
  return RoiPooler(scene.features, ring_width).feature(box);
}

DetectorModel DetectorModel::zeros(const ClassRegistry& registry, std::vector<int> classes,
                                   int feature_dim, const ProposalConfig& proposals) {
  DetectorModel m;
  m.registry = registry;
  m.classes = std::move(classes);
  m.feature_dim = feature_dim;
  const int k = static_cast<int>(m.classes.size());
  m.cls = Matrix(k + 1, feature_dim);
  m.reg = Matrix(4 * k, feature_dim);
  m.obj.assign(feature_dim, 0.0);
  m.proposals = proposals;
  return m;
}

int DetectorModel::index_of(int class_id) const {
  const auto it = std::find(classes.begin(), classes.end(), class_id);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

double objectness(const DetectorModel& model, std::span<const double> feat) {
  return logistic(dot(model.obj, feat));
}

CandidateFeatures::CandidateFeatures(const RoiPooler& pooler, std::span<const BBox> candidates)
    : boxes_(candidates.begin(), candidates.end()),
      dim_(pooler.dim()),
      data_(candidates.size() * static_cast<std::size_t>(pooler.dim())) {
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    pooler.feature_into(candidates[i], {data_.data() + i * dim_, static_cast<std::size_t>(dim_)});
  }
}

namespace {

// Ranks by objectness logit with candidate index breaking ties, so a limited
// ranking is always the prefix of the full one.
std::vector<Proposal> rank_proposals(std::span<const BBox> boxes, std::vector<double> logit,
                                     std::size_t limit) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    return logit[a] != logit[b] ? logit[a] > logit[b] : a < b;
  };
  limit = std::min(limit, order.size());
  const auto mid = order.begin() + static_cast<std::ptrdiff_t>(limit);
  if (limit < order.size()) std::nth_element(order.begin(), mid, order.end(), before);
  std::sort(order.begin(), mid, before);
  std::vector<Proposal> out(limit);
  for (std::size_t r = 0; r < limit; ++r) {
    const std::size_t i = order[r];
    out[r] = {boxes[i], logistic(logit[i]), i};
  }
  return out;
}

}  // namespace

std::vector<Proposal> propose(const DetectorModel& model, const CandidateFeatures& features,
                              std::size_t limit) {
  if (features.dim() != model.feature_dim) {
    throw Error("propose: feature dimension mismatch");
  }
  std::vector<double> logit(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) logit[i] = dot(model.obj, features[i]);
  return rank_proposals(features.boxes(), std::move(logit), limit);
}

std::vector<Proposal> propose(const DetectorModel& model, const RoiPooler& pooler,
                              std::span<const BBox> candidates) {
  std::vector<double> logit(candidates.size());
  std::vector<double> feat(pooler.dim());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    pooler.feature_into(candidates[i], feat);
    logit[i] = dot(model.obj, feat);
  }
  return rank_proposals(candidates, std::move(logit), candidates.size());
}

std::vector<Proposal> propose(const DetectorModel& model, const Scene& scene) {
  if (roi_feature_dim(scene.features.channels) != model.feature_dim) {
    throw Error("propose: scene channels do not match model feature dim");
  }
  const auto candidates =
      candidate_boxes(model.proposals, scene.features.height, scene.features.width);
  return propose(model, RoiPooler(scene.features, model.proposals.ring_width), candidates);
}

std::vector<double> logits(const DetectorModel& model, std::span<const double> feat) {
  if (static_cast<int>(feat.size()) != model.feature_dim) {
    throw Error("classify: feature dimension mismatch");
  }
  std::vector<double> z(model.cls.rows);
  for (int k = 0; k < model.cls.rows; ++k) z[k] = dot(model.cls.row(k), feat);
  return z;
}

ProbVector classify(const DetectorModel& model, std::span<const double> feat) {
  return softmax(logits(model, feat));
}

BoxDelta regress_index(const DetectorModel& model, std::span<const double> feat, int k) {
  if (k < 0 || k >= model.num_classes()) throw Error("regress: unknown class");
  return {dot(model.reg.row(4 * k), feat), dot(model.reg.row(4 * k + 1), feat),
          dot(model.reg.row(4 * k + 2), feat), dot(model.reg.row(4 * k + 3), feat)};
}

BoxDelta regress(const DetectorModel& model, std::span<const double> feat, int class_id) {
  return regress_index(model, feat, model.index_of(class_id));
}

Gradients Gradients::like(const DetectorModel& model) {
  Gradients g;
  g.cls = Matrix(model.cls.rows, model.cls.cols);
  g.reg = Matrix(model.reg.rows, model.reg.cols);
  g.obj.assign(model.obj.size(), 0.0);
  return g;
}

void Gradients::add(const Gradients& other, double scale) {
  for (std::size_t i = 0; i < cls.data.size(); ++i) cls.data[i] += scale * other.cls.data[i];
  for (std::size_t i = 0; i < reg.data.size(); ++i) reg.data[i] += scale * other.reg.data[i];
  for (std::size_t i = 0; i < obj.size(); ++i) obj[i] += scale * other.obj[i];
}

bool Gradients::all_finite() const {
  auto ok = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  return ok(cls.data) && ok(reg.data) && ok(obj);
}

double Gradients::max_abs() const {
  double m = 0.0;
  for (double v : cls.data) m = std::max(m, std::abs(v));
  for (double v : reg.data) m = std::max(m, std::abs(v));
  for (double v : obj) m = std::max(m, std::abs(v));
  return m;
}

LossBreakdown loss_and_grads(const DetectorModel& model, std::span<const RoiSample> rois,
                             std::span<const ObjectnessSample> obj_samples, double beta,
                             Gradients* grads) {
  LossBreakdown loss;
  const int n_rows = model.cls.rows;
  const int dim = model.feature_dim;
  const double inv_n = rois.empty() ? 0.0 : 1.0 / static_cast<double>(rois.size());

  std::vector<double> gz(n_rows);
  for (const auto& s : rois) {
    if (s.weight < 0.0) throw Error("loss: negative sample weight");
    if (s.target < 0 || s.target >= n_rows) throw Error("loss: target out of range");
    const auto z = logits(model, s.feat);
    const ProbVector p = softmax(z);
    const double py = p[s.target];
    loss.cls += s.weight * -std::log(std::max(py, kProbFloor)) * inv_n;
    if (grads && s.weight > 0.0 && py >= kProbFloor) {
      for (int k = 0; k < n_rows; ++k) {
        const bool clipped = std::abs(z[k]) > kLogitClip;
        gz[k] = clipped ? 0.0 : s.weight * (p[k] - (k == s.target ? 1.0 : 0.0)) * inv_n;
      }
      for (int k = 0; k < n_rows; ++k) {
        if (gz[k] == 0.0) continue;
        auto row = grads->cls.row(k);
        for (int d = 0; d < dim; ++d) row[d] += gz[k] * s.feat[d];
      }
    }
    if (s.box_target && s.target < model.num_classes()) {
      const BoxDelta pred = regress_index(model, s.feat, s.target);
      const auto pa = pred.as_array();
      const auto ta = s.box_target->as_array();
      for (int c = 0; c < 4; ++c) {
        const double diff = pa[c] - ta[c];
        loss.box += beta * s.weight * 0.5 * diff * diff * inv_n;
        if (grads) {
          auto row = grads->reg.row(4 * s.target + c);
          const double g = beta * s.weight * diff * inv_n;
          for (int d = 0; d < dim; ++d) row[d] += g * s.feat[d];
        }
      }
    }
  }

  const double inv_m =
      obj_samples.empty() ? 0.0 : 1.0 / static_cast<double>(obj_samples.size());
  for (const auto& s : obj_samples) {
    const double a = dot(model.obj, s.feat);
    loss.objectness += (s.positive ? softplus(-a) : softplus(a)) * inv_m;
    if (grads) {
      const double g = (logistic(a) - (s.positive ? 1.0 : 0.0)) * inv_m;
      for (int d = 0; d < dim; ++d) grads->obj[d] += g * s.feat[d];
    }
  }
  return loss;
}

void sgd_step(DetectorModel& model, const Gradients& grads, double lr) {
  if (lr < 0.0) throw ConfigError("sgd: learning rate must be non-negative");
  if (!grads.all_finite()) throw Error("divergence");
  if (grads.cls.data.size() != model.cls.data.size() ||
      grads.reg.data.size() != model.reg.data.size() || grads.obj.size() != model.obj.size()) {
    throw Error("sgd: gradient shape mismatch");
  }
  for (std::size_t i = 0; i < model.cls.data.size(); ++i) model.cls.data[i] -= lr * grads.cls.data[i];
  for (std::size_t i = 0; i < model.reg.data.size(); ++i) model.reg.data[i] -= lr * grads.reg.data[i];
  for (std::size_t i = 0; i < model.obj.size(); ++i) model.obj[i] -= lr * grads.obj[i];
}

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  throw ConfigError("train.schedule must be 'constant' or 'cosine', got '" + s + "'");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "cosine"; }

double TrainConfig::lr_at(int epoch) const {
  if (schedule == LrSchedule::kConstant || epochs <= 0) return lr;
  return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * epoch / epochs));
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (rois_per_scene <= 0 || objectness_samples <= 0) {
    throw ConfigError("train: sample counts must be positive");
  }
  if (!(positive_fraction > 0.0 && positive_fraction <= 1.0)) {
    throw ConfigError("train: positive_fraction must lie in (0,1]");
  }
  if (!(negative_iou <= positive_iou)) {
    throw ConfigError("train: negative_iou must not exceed positive_iou");
  }
  if (box_weight < 0.0) throw ConfigError("train: box_weight must be non-negative");
  if (proposals.top_n <= 0) throw ConfigError("train: top_n must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"lr", c.lr},
                     {"schedule", to_string(c.schedule)},
                     {"rois_per_scene", c.rois_per_scene},
                     {"positive_fraction", c.positive_fraction},
                     {"positive_iou", c.positive_iou},
                     {"negative_iou", c.negative_iou},
                     {"objectness_samples", c.objectness_samples},
                     {"box_weight", c.box_weight},
                     {"window_sizes", c.proposals.window_sizes},
                     {"stride", c.proposals.stride},
                     {"ring_width", c.proposals.ring_width},
                     {"top_n", c.proposals.top_n}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = c;
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.schedule = parse_lr_schedule(j.value("schedule", to_string(d.schedule)));
  c.rois_per_scene = j.value("rois_per_scene", d.rois_per_scene);
  c.positive_fraction = j.value("positive_fraction", d.positive_fraction);
  c.positive_iou = j.value("positive_iou", d.positive_iou);
  c.negative_iou = j.value("negative_iou", d.negative_iou);
  c.objectness_samples = j.value("objectness_samples", d.objectness_samples);
  c.box_weight = j.value("box_weight", d.box_weight);
  c.proposals.window_sizes = j.value("window_sizes", d.proposals.window_sizes);
  c.proposals.stride = j.value("stride", d.proposals.stride);
  c.proposals.ring_width = j.value("ring_width", d.proposals.ring_width);
  c.proposals.top_n = j.value("top_n", d.proposals.top_n);
}

ScenePlan plan_scene(std::span<const BBox> candidates,
                     std::span<const WeightedAnnotation> targets) {
  ScenePlan plan;
  plan.boxes.assign(candidates.begin(), candidates.end());
  plan.max_iou.assign(candidates.size(), 0.0);
  plan.argmax.assign(candidates.size(), -1);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const double v = iou(candidates[i], targets[t].box);
      if (plan.argmax[i] < 0 || v > plan.max_iou[i]) {
        plan.max_iou[i] = v;
        plan.argmax[i] = static_cast<int>(t);
      }
    }
  }
  return plan;
}

namespace {

template <typename T>
void partial_shuffle(std::vector<T>& v, std::size_t count, Rng& rng) {
  count = std::min(count, v.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, v.size() - 1)(rng);
    std::swap(v[i], v[j]);
  }
  v.resize(count);
}

}  // namespace

std::vector<std::pair<BBox, int>> sample_positives(const ScenePlan& plan,
                                                   std::span<const WeightedAnnotation> targets,
                                                   double pos_iou, std::size_t max_count,
                                                   Rng& rng) {
  std::vector<std::pair<BBox, int>> pool;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    pool.emplace_back(targets[t].box, static_cast<int>(t));
  }
  for (std::size_t i = 0; i < plan.boxes.size(); ++i) {
    if (plan.argmax[i] >= 0 && plan.max_iou[i] >= pos_iou) {
      pool.emplace_back(plan.boxes[i], plan.argmax[i]);
    }
  }
  partial_shuffle(pool, max_count, rng);
  return pool;
}

std::vector<std::size_t> sample_negative_band(const ScenePlan& plan, double neg_iou,
                                              const std::vector<bool>& excluded,
                                              std::size_t count, Rng& rng,
                                              std::span<const std::size_t> pool) {
  std::vector<std::size_t> eligible;
  auto consider = [&](std::size_t i) {
    if (i >= plan.boxes.size()) throw Error("sample_negative_band: index out of range");
    if (plan.max_iou[i] >= neg_iou) return;
    if (!excluded.empty() && excluded[i]) return;
    eligible.push_back(i);
  };
  if (pool.empty()) {
    for (std::size_t i = 0; i < plan.boxes.size(); ++i) consider(i);
  } else {
    for (std::size_t i : pool) consider(i);
  }
  partial_shuffle(eligible, count, rng);
  return eligible;
}

std::vector<std::size_t> proposal_pool(std::span<const Proposal> ranked, int top_n) {
  const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(std::max(top_n, 0)));
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = ranked[i].index;
  return pool;
}

SupervisedBatch build_supervised_batch(const DetectorModel& model, const RoiPooler& pooler,
                                       const ScenePlan& plan,
                                       std::span<const WeightedAnnotation> targets,
                                       const std::vector<bool>& excluded, const TrainConfig& cfg,
                                       Rng& rng, std::span<const Proposal> ranked) {
  SupervisedBatch batch;
  std::vector<Proposal> own;
  if (ranked.empty()) {
    own = propose(model, pooler, plan.boxes);
    ranked = own;
  }
  const auto pool = proposal_pool(ranked, cfg.proposals.top_n);
  const auto max_pos = static_cast<std::size_t>(
      std::lround(cfg.rois_per_scene * cfg.positive_fraction));
  const auto positives = sample_positives(plan, targets, cfg.positive_iou, max_pos, rng);
  for (const auto& [box, t] : positives) {
    const WeightedAnnotation& target = targets[t];
    const int k = model.index_of(target.class_id);
    if (k < 0) throw Error("train: annotation class unknown to the model");
    RoiSample s;
    s.feat = pooler.feature(box);
    s.target = k;
    s.weight = target.loss_weight;
    s.box_target = encode_delta(box, target.box);
    batch.objectness.push_back({s.feat, true});
    batch.rois.push_back(std::move(s));
  }
  const std::size_t n_neg = static_cast<std::size_t>(cfg.rois_per_scene) - batch.rois.size();
  batch.negative_indices = sample_negative_band(plan, cfg.negative_iou, excluded, n_neg, rng, pool);
  for (std::size_t i : batch.negative_indices) {
    RoiSample s;
    s.feat = pooler.feature(plan.boxes[i]);
    s.target = model.background_index();
    batch.rois.push_back(std::move(s));
  }
  const std::size_t n_obj_neg =
      static_cast<std::size_t>(cfg.objectness_samples) -
      std::min(positives.size(), static_cast<std::size_t>(cfg.objectness_samples));
  for (std::size_t i : sample_negative_band(plan, cfg.negative_iou, {}, n_obj_neg, rng)) {
    batch.objectness.push_back({pooler.feature(plan.boxes[i]), false});
  }
  return batch;
}

TrainingSet training_set(const StageDataset& ds) {
  TrainingSet set;
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    set.scenes.push_back(&ds.scenes[i]);
    std::vector<WeightedAnnotation> t;
    for (const auto& o : ds.visible[i]) t.push_back({o.box, o.class_id, 1.0, Origin::kGroundTruth});
    set.targets.push_back(std::move(t));
  }
  return set;
}

std::uint64_t scene_stream(std::uint64_t seed, std::uint64_t scene_id, int epoch,
                           std::uint64_t tag) {
  return derive_seed(seed, {tag, scene_id, static_cast<std::uint64_t>(epoch)});
}

std::vector<std::size_t> epoch_order(const TrainingSet& set, std::uint64_t seed, int epoch) {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> keys;
  for (const Scene* s : set.scenes) {
    keys.emplace_back(scene_stream(seed, s->scene_id, epoch, 0x6f72646572ULL), s->scene_id);
  }
  std::vector<std::size_t> order(set.scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  return order;
}

DetectorModel train_supervised(const TrainingSet& set, const ClassRegistry& registry,
                               const std::vector<int>& classes, const TrainConfig& cfg,
                               std::uint64_t seed, double* final_loss) {
  cfg.validate();
  if (set.scenes.empty()) throw Error("train: empty dataset");
  for (const auto& targets : set.targets) {
    for (const auto& t : targets) {
      if (std::find(classes.begin(), classes.end(), t.class_id) == classes.end()) {
        throw Error("train: annotation class " + std::to_string(t.class_id) +
                    " outside the training classes");
      }
    }
  }
  const FeatureGrid& g0 = set.scenes.front()->features;
  DetectorModel model =
      DetectorModel::zeros(registry, classes, roi_feature_dim(g0.channels), cfg.proposals);
  const auto candidates = candidate_boxes(cfg.proposals, g0.height, g0.width);

  for (const Scene* scene : set.scenes) {
    const FeatureGrid& g = scene->features;
    if (g.height != g0.height || g.width != g0.width || g.channels != g0.channels) {
      throw Error("train: scenes differ in grid shape");
    }
  }
  std::vector<ScenePlan> plans(set.scenes.size());
  std::vector<std::optional<RoiPooler>> poolers(set.scenes.size());
  std::vector<std::optional<CandidateFeatures>> cache(set.scenes.size());
  parallel_for(set.scenes.size(), [&](std::size_t i) {
    plans[i] = plan_scene(candidates, set.targets[i]);
    poolers[i].emplace(set.scenes[i]->features, cfg.proposals.ring_width);
    cache[i].emplace(*poolers[i], candidates);
  });

  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    epoch_loss = 0.0;
    for (std::size_t i : epoch_order(set, seed, epoch)) {
      const Scene& scene = *set.scenes[i];
      Rng rng(scene_stream(seed, scene.scene_id, epoch, kSupervisedTag));
      const auto batch =
          build_supervised_batch(model, *poolers[i], plans[i], set.targets[i], {}, cfg, rng,
                                 propose(model, *cache[i], cfg.proposals.top_n));
      Gradients grads = Gradients::like(model);
      const auto loss =
          loss_and_grads(model, batch.rois, batch.objectness, cfg.box_weight, &grads);
      epoch_loss += loss.total();
      sgd_step(model, grads, cfg.lr_at(epoch));
    }
    epoch_loss /= static_cast<double>(set.scenes.size());
  }
  if (final_loss) *final_loss = epoch_loss;
  return model;
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

Matrix matrix_from(const nlohmann::json& j) {
  Matrix m;
  m.rows = j.at("rows").get<int>();
  m.cols = j.at("cols").get<int>();
  m.data = j.at("data").get<std::vector<double>>();
  if (m.data.size() != static_cast<std::size_t>(m.rows) * m.cols) {
    throw Error("checkpoint: matrix size mismatch");
  }
  return m;
}

}  // namespace

void to_json(nlohmann::json& j, const DetectorModel& m) {
  j = nlohmann::json{{"registry", m.registry.stage_sets()},
                     {"classes", m.classes},
                     {"feature_dim", m.feature_dim},
                     {"trained_through_stage", m.trained_through_stage},
                     {"proposal_threshold", m.proposal_threshold},
                     {"proposals",
                      {{"window_sizes", m.proposals.window_sizes},
                       {"stride", m.proposals.stride},
                       {"ring_width", m.proposals.ring_width},
                       {"top_n", m.proposals.top_n}}},
                     {"W_cls", matrix_json(m.cls)},
                     {"W_reg", matrix_json(m.reg)},
                     {"w_obj", m.obj}};
}

void from_json(const nlohmann::json& j, DetectorModel& m) {
  m.registry = ClassRegistry(j.at("registry").get<std::vector<std::vector<int>>>());
  m.classes = j.at("classes").get<std::vector<int>>();
  m.feature_dim = j.at("feature_dim").get<int>();
  m.trained_through_stage = j.at("trained_through_stage").get<int>();
  m.proposal_threshold = j.at("proposal_threshold").get<double>();
  const auto& p = j.at("proposals");
  m.proposals.window_sizes = p.at("window_sizes").get<std::vector<int>>();
  m.proposals.stride = p.at("stride").get<int>();
  m.proposals.ring_width = p.at("ring_width").get<double>();
  m.proposals.top_n = p.at("top_n").get<int>();
  m.cls = matrix_from(j.at("W_cls"));
  m.reg = matrix_from(j.at("W_reg"));
  m.obj = j.at("w_obj").get<std::vector<double>>();
  const int k = static_cast<int>(m.classes.size());
  if (m.cls.rows != k + 1 || m.reg.rows != 4 * k || m.cls.cols != m.feature_dim ||
      m.reg.cols != m.feature_dim || static_cast<int>(m.obj.size()) != m.feature_dim) {
    throw Error("checkpoint: weight shapes inconsistent with registry");
  }
}

}  // namespace bpf
