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

#include "bpf/distill.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "bpf/error.hpp"

namespace bpf {

BoxMode parse_box_mode(const std::string& s) {
  if (s == "part") return BoxMode::kPart;
  if (s == "all") return BoxMode::kAll;
  throw ConfigError("distill.box_mode must be 'part' or 'all', got '" + s + "'");
}

std::string to_string(BoxMode m) { return m == BoxMode::kPart ? "part" : "all"; }

void DistillConfig::validate() const {
  if (!(lambda2 > 0.0 && lambda2 <= 1.0)) throw ConfigError("distill.lambda2 must lie in (0,1]");
  if (n_top <= 0 || n_sample <= 0) throw ConfigError("distill region counts must be positive");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"lambda2", c.lambda2},
                     {"box_mode", to_string(c.box_mode)},
                     {"n_top", c.n_top},
                     {"n_sample", c.n_sample}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  const DistillConfig d = c;
  c.lambda2 = j.value("lambda2", d.lambda2);
  c.box_mode = parse_box_mode(j.value("box_mode", to_string(d.box_mode)));
  c.n_top = j.value("n_top", d.n_top);
  c.n_sample = j.value("n_sample", d.n_sample);
}

std::vector<Proposal> sample_distill_regions(std::span<const Proposal> ranked, int n_top,
                                             int n_sample, Rng& rng) {
  const std::size_t top = std::min(ranked.size(), static_cast<std::size_t>(std::max(n_top, 0)));
  std::vector<Proposal> pool(ranked.begin(), ranked.begin() + top);
  const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(std::max(n_sample, 0)));
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(rng);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

std::vector<Proposal> select_distill_regions(const DetectorModel& m_old, const Scene& scene,
                                             Rng& rng, int n_top, int n_sample) {
  const auto ranked = propose(m_old, scene);
  return sample_distill_regions(ranked, n_top, n_sample, rng);
}

RegionPartition partition_regions(std::vector<Proposal> regions, std::span<const BBox> gt,
                                  double lambda2) {
  RegionPartition part;
  part.regions = std::move(regions);
  for (std::size_t j = 0; j < part.regions.size(); ++j) {
    if (max_iou(part.regions[j].box, gt) <= lambda2) {
      part.r1.push_back(j);
    } else {
      part.r2.push_back(j);
    }
  }
  return part;
}

namespace {

void check_layout(const ProbVector& p_old, const ProbVector& p_im, const TargetLayout& layout) {
  if (static_cast<int>(p_old.size()) != layout.num_old + 1 ||
      static_cast<int>(p_im.size()) != layout.num_current + 1) {
    throw Error("compose: teacher distribution length does not match the class layout");
  }
}

}  // namespace

DistillTarget compose_target_r1(const ProbVector& p_old, const ProbVector& p_im,
                                const TargetLayout& layout) {
  check_layout(p_old, p_im, layout);
  DistillTarget t;
  t.region_tag = RegionTag::kR1;
  t.probs.reserve(layout.size());
  const double bg_old = p_old.background();
  for (int k = 0; k < layout.num_old; ++k) t.probs.push_back(p_old[k]);
  for (int k = 0; k <= layout.num_current; ++k) t.probs.push_back(p_im[k] * bg_old);
  return t;
}

DistillTarget compose_target_r2(const ProbVector& p_old, const ProbVector& p_im,
                                const TargetLayout& layout) {
  check_layout(p_old, p_im, layout);
  DistillTarget t;
  t.region_tag = RegionTag::kR2;
  t.probs.reserve(layout.size());
  const double bg_im = p_im.background();
  for (int k = 0; k < layout.num_old; ++k) t.probs.push_back(p_old[k] * bg_im);
  for (int k = 0; k < layout.num_current; ++k) t.probs.push_back(p_im[k]);
  t.probs.push_back(p_old.background() * bg_im);
  return t;
}

double kl_div(std::span<const double> target, const ProbVector& student) {
  if (target.size() != student.size()) throw Error("kl_div: length mismatch");
  double kl = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (target[k] <= 0.0) continue;
    kl += target[k] * (std::log(target[k]) - std::log(std::max(student[k], kProbFloor)));
  }
  return std::max(kl, 0.0);
}

std::vector<double> kl_logit_grad(std::span<const double> target,
                                  std::span<const double> logits) {
  const ProbVector s = softmax(logits);
  double live_mass = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (s[k] >= kProbFloor) live_mass += target[k];
  }
  std::vector<double> g(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (std::abs(logits[j]) > kLogitClip) continue;
    g[j] = s[j] * live_mass - (s[j] >= kProbFloor ? target[j] : 0.0);
  }
  return g;
}

namespace {

void check_ukd(const ProbVector& p_old, std::size_t student_size, const TargetLayout& layout) {
  if (static_cast<int>(p_old.size()) != layout.num_old + 1 ||
      static_cast<int>(student_size) != layout.size()) {
    throw Error("ukd: distribution length does not match the class layout");
  }
}

}  // namespace

double ukd_loss(const ProbVector& p_old, const ProbVector& s, const TargetLayout& layout) {
  check_ukd(p_old, s.size(), layout);
  double unified = s.background();
  for (int k = 0; k < layout.num_current; ++k) unified += s[layout.num_old + k];
  double acc = p_old.background() * std::log(std::max(unified, kProbFloor));
  for (int k = 0; k < layout.num_old; ++k) acc += p_old[k] * std::log(std::max(s[k], kProbFloor));
  return -acc / (layout.num_old + 1);
}

std::vector<double> ukd_logit_grad(const ProbVector& p_old, std::span<const double> logits,
                                   const TargetLayout& layout) {
  check_ukd(p_old, logits.size(), layout);
  const ProbVector s = softmax(logits);
  const int n = layout.size();
  double unified = s.background();
  for (int k = 0; k < layout.num_current; ++k) unified += s[layout.num_old + k];

  // Gradient of the bracketed sum; negated and normalized below.
  std::vector<double> g(n, 0.0);
  if (unified >= kProbFloor) {
    const double a = p_old.background();
    for (int j = 0; j < n; ++j) {
      const bool in_unified = j >= layout.num_old;
      g[j] += a * ((in_unified ? s[j] / unified : 0.0) - s[j]);
    }
  }
  for (int c = 0; c < layout.num_old; ++c) {
    if (s[c] < kProbFloor) continue;
    for (int j = 0; j < n; ++j) g[j] += p_old[c] * ((j == c ? 1.0 : 0.0) - s[j]);
  }
  for (int j = 0; j < n; ++j) {
    g[j] = std::abs(logits[j]) > kLogitClip ? 0.0 : -g[j] / (layout.num_old + 1);
  }
  return g;
}

bool box_in_scope(RegionTag tag, BoxMode mode, const TargetLayout& layout, int k) {
  if (mode == BoxMode::kAll) return true;
  const bool is_old = k < layout.num_old;
  return tag == RegionTag::kR1 ? is_old : !is_old;
}

double box_distill_loss(RegionTag tag, BoxMode mode, const RegionBoxes& boxes,
                        std::vector<BoxDelta>* student_grad) {
  const TargetLayout layout{static_cast<int>(boxes.teacher_old.size()),
                            static_cast<int>(boxes.student.size() - boxes.teacher_old.size())};
  if (boxes.student.size() < boxes.teacher_old.size()) {
    throw Error("box_distill_loss: student has fewer classes than the old teacher");
  }
  if (student_grad) student_grad->assign(boxes.student.size(), BoxDelta{});
  double loss = 0.0;
  for (int k = 0; k < layout.num_old + layout.num_current; ++k) {
    if (!box_in_scope(tag, mode, layout, k)) continue;
    const bool is_old = k < layout.num_old;
    if (!is_old && static_cast<int>(boxes.teacher_current.size()) != layout.num_current) {
      throw Error("box_distill_loss: current-class teacher boxes missing");
    }
    const BoxDelta& t = is_old ? boxes.teacher_old[k] : boxes.teacher_current[k - layout.num_old];
    const auto ta = t.as_array();
    const auto sa = boxes.student[k].as_array();
    std::array<double, 4> g{};
    for (int c = 0; c < 4; ++c) {
      const double d = sa[c] - ta[c];
      loss += 0.5 * d * d;
      g[c] = d;
    }
    if (student_grad) (*student_grad)[k] = {g[0], g[1], g[2], g[3]};
  }
  return loss;
}

TargetLayout layout_for(const DetectorModel& m_old, const DetectorModel& m_im,
                        const DetectorModel& m_cur) {
  std::vector<int> expect = m_old.classes;
  expect.insert(expect.end(), m_im.classes.begin(), m_im.classes.end());
  if (expect != m_cur.classes) {
    throw Error("distill: student classes must be old classes followed by expert classes");
  }
  return {m_old.num_classes(), m_im.num_classes()};
}

TargetLayout layout_for(const DetectorModel& m_old, const DetectorModel& m_cur) {
  if (m_cur.num_classes() < m_old.num_classes() ||
      !std::equal(m_old.classes.begin(), m_old.classes.end(), m_cur.classes.begin())) {
    throw Error("distill: student must extend the old model's classes");
  }
  return {m_old.num_classes(), m_cur.num_classes() - m_old.num_classes()};
}

namespace {

void accumulate_region(const std::vector<double>& logit_grad,
                       const std::vector<BoxDelta>& box_grad, std::span<const double> feat,
                       double scale, Gradients& grads) {
  const int dim = static_cast<int>(feat.size());
  for (std::size_t j = 0; j < logit_grad.size(); ++j) {
    const double g = logit_grad[j] * scale;
    if (g == 0.0) continue;
    auto row = grads.cls.row(static_cast<int>(j));
    for (int d = 0; d < dim; ++d) row[d] += g * feat[d];
  }
  for (std::size_t k = 0; k < box_grad.size(); ++k) {
    const auto a = box_grad[k].as_array();
    for (int c = 0; c < 4; ++c) {
      const double g = a[c] * scale;
      if (g == 0.0) continue;
      auto row = grads.reg.row(static_cast<int>(4 * k + c));
      for (int d = 0; d < dim; ++d) row[d] += g * feat[d];
    }
  }
}

std::vector<BoxDelta> all_deltas(const DetectorModel& m, std::span<const double> feat) {
  std::vector<BoxDelta> out;
  out.reserve(m.num_classes());
  for (int k = 0; k < m.num_classes(); ++k) out.push_back(regress_index(m, feat, k));
  return out;
}

}  // namespace

DistillResult dwf_loss_regions(const RoiPooler& pooler, std::span<const Proposal> regions,
                               std::span<const BBox> gt, const DetectorModel& m_old,
                               const DetectorModel& m_im, const DetectorModel& m_cur,
                               const DistillConfig& cfg, Gradients* grads) {
  DistillResult res;
  if (regions.empty()) return res;
  const TargetLayout layout = layout_for(m_old, m_im, m_cur);
  const auto part = partition_regions({regions.begin(), regions.end()}, gt, cfg.lambda2);
  res.num_r1 = part.r1.size();
  res.num_r2 = part.r2.size();
  const double scale = 1.0 / static_cast<double>(regions.size());

  auto visit = [&](std::size_t j, RegionTag tag) {
    const auto feat = pooler.feature(part.regions[j].box);
    const ProbVector p_old = classify(m_old, feat);
    const ProbVector p_im = classify(m_im, feat);
    const auto z = logits(m_cur, feat);
    const DistillTarget target = tag == RegionTag::kR1 ? compose_target_r1(p_old, p_im, layout)
                                                       : compose_target_r2(p_old, p_im, layout);
    const double cls = kl_div(target.probs, softmax(z));

    RegionBoxes boxes{all_deltas(m_old, feat), all_deltas(m_im, feat), all_deltas(m_cur, feat)};
    std::vector<BoxDelta> box_grad;
    const double box = box_distill_loss(tag, cfg.box_mode, boxes, grads ? &box_grad : nullptr);

    res.cls += cls * scale;
    res.box += box * scale;
    if (grads) accumulate_region(kl_logit_grad(target.probs, z), box_grad, feat, scale, *grads);
  };
  for (std::size_t j : part.r1) visit(j, RegionTag::kR1);
  for (std::size_t j : part.r2) visit(j, RegionTag::kR2);
  res.loss = res.cls + res.box;
  return res;
}

DistillResult dwf_loss(const Scene& scene, const DetectorModel& m_old, const DetectorModel& m_im,
                       const DetectorModel& m_cur, std::span<const BBox> gt,
                       const DistillConfig& cfg, Rng& rng, Gradients* grads) {
  const auto regions = select_distill_regions(m_old, scene, rng, cfg.n_top, cfg.n_sample);
  const RoiPooler pooler(scene.features, m_cur.proposals.ring_width);
  return dwf_loss_regions(pooler, regions, gt, m_old, m_im, m_cur, cfg, grads);
}

DistillResult ukd_loss_regions(const RoiPooler& pooler, std::span<const Proposal> regions,
                               const DetectorModel& m_old, const DetectorModel& m_cur,
                               Gradients* grads) {
  DistillResult res;
  if (regions.empty()) return res;
  const TargetLayout layout = layout_for(m_old, m_cur);
  const double scale = 1.0 / static_cast<double>(regions.size());
  res.num_r1 = regions.size();
  for (const auto& r : regions) {
    const auto feat = pooler.feature(r.box);
    const ProbVector p_old = classify(m_old, feat);
    const auto z = logits(m_cur, feat);
    const double cls = ukd_loss(p_old, softmax(z), layout);
    RegionBoxes boxes{all_deltas(m_old, feat), {}, all_deltas(m_cur, feat)};
    std::vector<BoxDelta> box_grad;
    const double box =
        box_distill_loss(RegionTag::kR1, BoxMode::kPart, boxes, grads ? &box_grad : nullptr);
    res.cls += cls * scale;
    res.box += box * scale;
    if (grads) accumulate_region(ukd_logit_grad(p_old, z, layout), box_grad, feat, scale, *grads);
  }
  res.loss = res.cls + res.box;
  return res;
}

}  // namespace bpf
