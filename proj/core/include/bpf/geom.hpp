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

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace bpf {

/// Axis-aligned box in half-open continuous scene coordinates.
/// One scene unit equals one feature-grid cell.
struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool valid() const { return x_min <= x_max && y_min <= y_max; }
  bool degenerate() const { return width() <= 0.0 || height() <= 0.0; }

  bool operator==(const BBox&) const = default;
};

struct ScoredBox {
  BBox box;
  double score = 0.0;
  std::optional<int> class_id;
};

double iou(const BBox& a, const BBox& b);

/// Largest IoU of `box` against any of `others`; 0 for an empty set.
double max_iou(const BBox& box, std::span<const BBox> others);

/// Greedy class-agnostic NMS. Returns indices into `dets` of the kept boxes in
/// descending score order; equal scores keep the lower index first.
std::vector<std::size_t> nms_indices(std::span<const ScoredBox> dets,
                                     double iou_thresh);

std::vector<ScoredBox> nms(std::span<const ScoredBox> dets, double iou_thresh);

/// Half-open range of grid cells whose centers fall inside a box.
struct CellRange {
  int col_begin = 0;
  int col_end = 0;
  int row_begin = 0;
  int row_end = 0;

  int count() const {
    return (col_end > col_begin && row_end > row_begin)
               ? (col_end - col_begin) * (row_end - row_begin)
               : 0;
  }
};

CellRange cells_in(const BBox& box, int height, int width);

/// Dense single-channel H x W map, row-major.
struct Grid2D {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Grid2D() = default;
  Grid2D(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int row, int col) {
    return values[static_cast<std::size_t>(row) * width + col];
  }
  double at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * width + col];
  }
};

/// Mean of the cells whose centers lie inside `region`.
/// Throws bpf::Error("empty region") when no cell center is covered.
double region_avg(const Grid2D& grid, const BBox& region);

}  // namespace bpf
