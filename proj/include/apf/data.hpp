// Copyright 2026 The APF Authors
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

#include <string>
#include <vector>

#include "apf/geometry.hpp"
#include "apf/io.hpp"
#include "apf/rng.hpp"

namespace apf {

struct ClassificationSample {
  PointCloud cloud;
  Index label = -1;
};

struct ClassificationDataset {
  std::vector<ClassificationSample> samples;
  Index num_classes = 0;

  /// Throws InvalidArgument when empty, when num_classes < 2, or when any
  /// label falls outside [0, num_classes).
  void validate() const;

  /// Sample indices per class label.
  std::vector<std::vector<Index>> by_class() const;
};

struct SegmentationSample {
  PointCloud cloud;
  std::vector<Index> labels;  // one part label per point
};

struct SegmentationDataset {
  std::vector<SegmentationSample> samples;
  Index num_parts = 0;

  void validate() const;
};

/// Analytic surfaces for seeded benchmark sets. All shapes are centered at
/// the origin at O(1) scale; the pipeline renormalizes anyway, so only
/// shape, not size, carries class information.
enum class ShapeKind { sphere, cube, cylinder, torus };

const char* to_string(ShapeKind kind);

/// Uniform surface samples of one shape instance.
PointCloud sample_shape(ShapeKind kind, Index n_points, Rng& rng);

/// Labeled set with per_class instances of every listed shape, labels in
/// list order. Same seed, same dataset, bit for bit.
ClassificationDataset make_shape_dataset(std::uint64_t seed, const std::vector<ShapeKind>& classes,
                                         Index per_class, Index points_per_cloud);

/// Loads manifest-listed samples. Classification entries are point-binary
/// or OFF files with the class label in the manifest; OFF files carry no
/// labels of their own.
ClassificationDataset load_classification(const std::vector<ManifestEntry>& entries,
                                          Index num_classes = 0);

/// Segmentation entries are point-binary files; per-point labels come from
/// the entry's label file (a point binary whose label column is used), or
/// from the sample file itself when no label file is named.
SegmentationDataset load_segmentation(const std::vector<ManifestEntry>& entries,
                                      Index num_parts = 0);

}  // namespace apf
