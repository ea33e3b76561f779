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

#include "bpf/geom.hpp"

namespace bpf {

enum class Origin { kGroundTruth, kPseudo };

/// Training target box; ground truth always carries weight 1.
struct WeightedAnnotation {
  BBox box;
  int class_id = 0;
  double loss_weight = 1.0;
  Origin origin = Origin::kGroundTruth;

  bool operator==(const WeightedAnnotation&) const = default;
};

}  // namespace bpf
