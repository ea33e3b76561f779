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

#include "bpf/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bpf/error.hpp"

namespace bpf {

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double max_iou(const BBox& box, std::span<const BBox> others) {
  double best = 0.0;
  for (const auto& o : others) best = std::max(best, iou(box, o));
  return best;
}

std::vector<std::size_t> nms_indices(std::span<const ScoredBox> dets,
                                     double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return dets[a].score > dets[b].score;
                   });

  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(dets[i].box, dets[j].box) > iou_thresh) {
        suppressed[j] = true;
      }
    }
  }
  return keep;
}

std::vector<ScoredBox> nms(std::span<const ScoredBox> dets, double iou_thresh) {
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(dets, iou_thresh)) out.push_back(dets[i]);
  return out;
}

CellRange cells_in(const BBox& box, int height, int width) {
  // Cell j has center j + 0.5; it is inside iff x_min <= j + 0.5 < x_max.
  auto lo = [](double v, int n) {
    return std::clamp(static_cast<int>(std::ceil(v - 0.5)), 0, n);
  };
  CellRange r;
  r.col_begin = lo(box.x_min, width);
  r.col_end = lo(box.x_max, width);
  r.row_begin = lo(box.y_min, height);
  r.row_end = lo(box.y_max, height);
  return r;
}

double region_avg(const Grid2D& grid, const BBox& region) {
  const CellRange r = cells_in(region, grid.height, grid.width);
  if (r.count() == 0) throw Error("empty region");
  double sum = 0.0;
  for (int row = r.row_begin; row < r.row_end; ++row) {
    for (int col = r.col_begin; col < r.col_end; ++col) sum += grid.at(row, col);
  }
  return sum / r.count();
}

}  // namespace bpf
