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

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "apf/common.hpp"

namespace apf {

/// A point set with optional per-point feature channels. Coordinates are
/// stored as 32-bit floats; all internal distance arithmetic is double.
struct PointCloud {
  using Points = Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor>;
  using Features = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Points points;      // N x 3
  Features features;  // N x C, or 0 x 0 when absent

  Index size() const { return points.rows(); }
  Index feature_width() const { return features.rows() == 0 ? 0 : features.cols(); }

  /// Throws InvalidArgument on an empty cloud, a non-finite coordinate, or a
  /// feature row count that disagrees with the point count.
  void validate() const;
};

/// Quantization grid for Morton encoding. The default box is the
/// post-normalization cube [-1,1]^3 at 10 bits per axis. A degenerate axis
/// (min == max) quantizes every point to 0 on that axis.
struct MortonConfig {
  int bits_per_axis = 10;
  std::array<float, 3> box_min{-1.0f, -1.0f, -1.0f};
  std::array<float, 3> box_max{1.0f, 1.0f, 1.0f};

  /// Throws InvalidArgument unless 1 <= bits <= 21 and min <= max per axis.
  void validate() const;

  /// Config over the cloud's own axis-aligned bounding box.
  static MortonConfig bounding(const PointCloud& cloud, int bits = 10);
};

/// Result of sampling and grouping. `order` sorts centroids by ascending
/// Morton code; groups are lists of point indices into the source cloud,
/// each sorted by (distance to centroid, point index).
struct GroupedPoints {
  std::vector<Index> centroid_indices;       // N_s entries, distinct
  std::vector<std::vector<Index>> groups;    // N_s lists of k entries
  std::vector<std::uint64_t> morton_codes;   // per centroid, pre-order
  std::vector<Index> order;                  // permutation of {0..N_s-1}

  Index group_count() const { return static_cast<Index>(centroid_indices.size()); }
};

/// Centers the cloud on its centroid and scales the farthest point to unit
/// norm. The centroid is accumulated per axis over sorted values in double,
/// so the result is bit-identical under any permutation of the input points.
/// Features pass through unchanged. A cloud of coincident points maps to all
/// zeros.
PointCloud normalize_unit_sphere(const PointCloud& cloud);

/// Interleaves the low `bits` of each component: bit i of x lands at code
/// position 3i, y at 3i+1, z at 3i+2. Throws RangeError when a component has
/// a set bit at or above `bits`.
std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int bits);

/// Quantizes one point to the config grid: q = floor((c - min)/(max - min) *
/// (2^B - 1)), clamped to the grid; degenerate axes quantize to 0.
std::array<std::uint32_t, 3> morton_quantize(const Eigen::RowVector3f& p,
                                             const MortonConfig& config);

/// Morton code of one point under the config grid.
std::uint64_t morton_code_of(const Eigen::RowVector3f& p, const MortonConfig& config);

/// Greedy farthest point sampling. Without an explicit start index the seed
/// point is the one with the smallest Morton code over the cloud's bounding
/// box (ties by lexicographic coordinates, then index). Each later pick
/// maximizes the minimum distance to the selected set; ties break by smaller
/// candidate Morton code, then lexicographic coordinates, then index.
std::vector<Index> farthest_point_sample(const PointCloud& cloud, Index n_s,
                                         std::optional<Index> start = std::nullopt);

/// Exhaustive k-nearest-neighbor grouping around the given centroids. Each
/// centroid is its own nearest neighbor (distance zero); distance ties break
/// by smaller point index. Returns groups only; codes and order stay empty.
GroupedPoints knn_group(const PointCloud& cloud, std::vector<Index> centroid_indices,
                        Index k);

/// Permutation sorting the given centroids by ascending Morton code under
/// the config grid, ties by position in the centroid list.
std::vector<Index> morton_order(const PointCloud& cloud,
                                const std::vector<Index>& centroid_indices,
                                const MortonConfig& config);

/// Throws InvalidArgument unless `order` is a bijection on {0..n-1}.
void validate_permutation(const std::vector<Index>& order, Index n);

/// Pure gather: out[i] = in[order[i]].
template <typename T>
std::vector<T> apply_order(const std::vector<T>& in, const std::vector<Index>& order) {
  validate_permutation(order, static_cast<Index>(in.size()));
  std::vector<T> out;
  out.reserve(in.size());
  for (Index i : order) out.push_back(in[static_cast<std::size_t>(i)]);
  return out;
}

/// Inverse permutation: inverse[order[i]] = i.
std::vector<Index> inverse_order(const std::vector<Index>& order);

/// Full grouping pipeline: canonical-start FPS, kNN groups, Morton codes and
/// ordering for the sampled centroids under the config grid.
GroupedPoints group_and_order(const PointCloud& cloud, Index n_s, Index k,
                              const MortonConfig& config = MortonConfig{});

}  // namespace apf
