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

#include "apf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <tuple>

namespace apf {
namespace {

// Squared distance in double from float coordinates, summed in fixed axis
// order so every caller computes the identical value.
double dist2(const PointCloud::Points& pts, Index a, Index b) {
  const double dx = double(pts(a, 0)) - double(pts(b, 0));
  const double dy = double(pts(a, 1)) - double(pts(b, 1));
  const double dz = double(pts(a, 2)) - double(pts(b, 2));
  return dx * dx + dy * dy + dz * dz;
}

std::tuple<float, float, float> coord_key(const PointCloud::Points& pts, Index i) {
  return {pts(i, 0), pts(i, 1), pts(i, 2)};
}

void check_centroid_indices(const PointCloud& cloud, const std::vector<Index>& idx) {
  for (Index i : idx)
    if (i < 0 || i >= cloud.size())
      throw RangeError("centroid index " + std::to_string(i) + " outside cloud of " +
                       std::to_string(cloud.size()) + " points");
}

}  // namespace

void PointCloud::validate() const {
  if (points.rows() < 1) throw InvalidArgument("point cloud is empty");
  if (!points.allFinite()) throw InvalidArgument("point cloud has a non-finite coordinate");
  if (features.rows() != 0) {
    if (features.rows() != points.rows())
      throw InvalidArgument("feature rows " + std::to_string(features.rows()) +
                            " != point count " + std::to_string(points.rows()));
    if (!features.allFinite()) throw InvalidArgument("point features have a non-finite value");
  }
}

void MortonConfig::validate() const {
  if (bits_per_axis < 1 || bits_per_axis > 21)
    throw InvalidArgument("bits_per_axis " + std::to_string(bits_per_axis) +
                          " outside [1,21]");
  for (int a = 0; a < 3; ++a)
    if (!(box_min[a] <= box_max[a]))
      throw InvalidArgument("morton box axis " + std::to_string(a) + " has min > max");
}

MortonConfig MortonConfig::bounding(const PointCloud& cloud, int bits) {
  cloud.validate();
  MortonConfig c;
  c.bits_per_axis = bits;
  for (int a = 0; a < 3; ++a) {
    c.box_min[a] = cloud.points.col(a).minCoeff();
    c.box_max[a] = cloud.points.col(a).maxCoeff();
  }
  c.validate();
  return c;
}

PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  cloud.validate();
  const Index n = cloud.size();

  // Per-axis centroid over sorted values: the sum then depends only on the
  // multiset of coordinates, not on input order.
  double center[3];
  std::vector<double> axis(static_cast<std::size_t>(n));
  for (int a = 0; a < 3; ++a) {
    for (Index i = 0; i < n; ++i) axis[static_cast<std::size_t>(i)] = cloud.points(i, a);
    std::sort(axis.begin(), axis.end());
    double sum = 0;
    for (double v : axis) sum += v;
    center[a] = sum / double(n);
  }

  double max_r2 = 0;
  for (Index i = 0; i < n; ++i) {
    const double dx = double(cloud.points(i, 0)) - center[0];
    const double dy = double(cloud.points(i, 1)) - center[1];
    const double dz = double(cloud.points(i, 2)) - center[2];
    max_r2 = std::max(max_r2, dx * dx + dy * dy + dz * dz);
  }

  PointCloud out;
  out.points.resize(n, 3);
  out.features = cloud.features;
  if (max_r2 == 0) {
    out.points.setZero();
    return out;
  }
  const double inv_r = 1.0 / std::sqrt(max_r2);
  for (Index i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a)
      out.points(i, a) = static_cast<float>((double(cloud.points(i, a)) - center[a]) * inv_r);
  return out;
}

std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int bits) {
  if (bits < 1 || bits > 21)
    throw InvalidArgument("morton bits " + std::to_string(bits) + " outside [1,21]");
  const std::uint32_t limit = std::uint32_t(1) << bits;
  if (x >= limit || y >= limit || z >= limit)
    throw RangeError("morton component out of range for " + std::to_string(bits) + " bits");
  std::uint64_t code = 0;
  for (int i = 0; i < bits; ++i) {
    code |= (std::uint64_t((x >> i) & 1u)) << (3 * i);
    code |= (std::uint64_t((y >> i) & 1u)) << (3 * i + 1);
    code |= (std::uint64_t((z >> i) & 1u)) << (3 * i + 2);
  }
  return code;
}

std::array<std::uint32_t, 3> morton_quantize(const Eigen::RowVector3f& p,
                                             const MortonConfig& config) {
  config.validate();
  const std::uint32_t top = (std::uint32_t(1) << config.bits_per_axis) - 1;
  std::array<std::uint32_t, 3> q{};
  for (int a = 0; a < 3; ++a) {
    const double lo = config.box_min[a], hi = config.box_max[a];
    if (lo == hi) {
      q[a] = 0;
      continue;
    }
    const double t = (double(p[a]) - lo) / (hi - lo) * double(top);
    const double f = std::floor(t);
    q[a] = f <= 0 ? 0u : (f >= double(top) ? top : std::uint32_t(f));
  }
  return q;
}

std::uint64_t morton_code_of(const Eigen::RowVector3f& p, const MortonConfig& config) {
  const auto q = morton_quantize(p, config);
  return morton_encode(q[0], q[1], q[2], config.bits_per_axis);
}

std::vector<Index> farthest_point_sample(const PointCloud& cloud, Index n_s,
                                         std::optional<Index> start) {
  cloud.validate();
  const Index n = cloud.size();
  if (n_s < 1 || n_s > n)
    throw InvalidArgument("sample count " + std::to_string(n_s) + " outside [1," +
                          std::to_string(n) + "]");

  // Codes over the cloud's own bounding box serve the canonical start and
  // every later tie-break.
  const MortonConfig box = MortonConfig::bounding(cloud);
  std::vector<std::uint64_t> code(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    code[static_cast<std::size_t>(i)] = morton_code_of(cloud.points.row(i), box);

  // prefer(a, b): does candidate a beat candidate b on the deterministic
  // tie chain (code, lexicographic coordinates, index)?
  auto prefer = [&](Index a, Index b) {
    const auto ca = code[static_cast<std::size_t>(a)], cb = code[static_cast<std::size_t>(b)];
    if (ca != cb) return ca < cb;
    const auto ka = coord_key(cloud.points, a), kb = coord_key(cloud.points, b);
    if (ka != kb) return ka < kb;
    return a < b;
  };

  Index first;
  if (start.has_value()) {
    first = *start;
    if (first < 0 || first >= n)
      throw RangeError("start index " + std::to_string(first) + " outside cloud of " +
                       std::to_string(n) + " points");
  } else {
    first = 0;
    for (Index i = 1; i < n; ++i)
      if (prefer(i, first)) first = i;
  }

  std::vector<Index> picked;
  picked.reserve(static_cast<std::size_t>(n_s));
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  std::vector<double> min_d2(static_cast<std::size_t>(n),
                             std::numeric_limits<double>::infinity());
  picked.push_back(first);
  taken[static_cast<std::size_t>(first)] = 1;

  while (static_cast<Index>(picked.size()) < n_s) {
    const Index last = picked.back();
    for (Index i = 0; i < n; ++i)
      if (!taken[static_cast<std::size_t>(i)])
        min_d2[static_cast<std::size_t>(i)] =
            std::min(min_d2[static_cast<std::size_t>(i)], dist2(cloud.points, i, last));
    Index best = -1;
    for (Index i = 0; i < n; ++i) {
      if (taken[static_cast<std::size_t>(i)]) continue;
      if (best < 0 || min_d2[static_cast<std::size_t>(i)] > min_d2[static_cast<std::size_t>(best)] ||
          (min_d2[static_cast<std::size_t>(i)] == min_d2[static_cast<std::size_t>(best)] &&
           prefer(i, best)))
        best = i;
    }
    picked.push_back(best);
    taken[static_cast<std::size_t>(best)] = 1;
  }
  return picked;
}

GroupedPoints knn_group(const PointCloud& cloud, std::vector<Index> centroid_indices,
                        Index k) {
  cloud.validate();
  const Index n = cloud.size();
  if (k < 1 || k > n)
    throw InvalidArgument("neighbor count " + std::to_string(k) + " outside [1," +
                          std::to_string(n) + "]");
  check_centroid_indices(cloud, centroid_indices);

  GroupedPoints g;
  g.groups.reserve(centroid_indices.size());
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n));
  for (Index c : centroid_indices) {
    for (Index i = 0; i < n; ++i)
      dist[static_cast<std::size_t>(i)] = {dist2(cloud.points, i, c), i};
    std::sort(dist.begin(), dist.end());
    std::vector<Index> group(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j) group[static_cast<std::size_t>(j)] = dist[static_cast<std::size_t>(j)].second;
    g.groups.push_back(std::move(group));
  }
  g.centroid_indices = std::move(centroid_indices);
  return g;
}

std::vector<Index> morton_order(const PointCloud& cloud,
                                const std::vector<Index>& centroid_indices,
                                const MortonConfig& config) {
  cloud.validate();
  config.validate();
  check_centroid_indices(cloud, centroid_indices);
  const Index m = static_cast<Index>(centroid_indices.size());
  std::vector<std::uint64_t> codes(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i)
    codes[static_cast<std::size_t>(i)] =
        morton_code_of(cloud.points.row(centroid_indices[static_cast<std::size_t>(i)]), config);
  std::vector<Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Index(0));
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    const auto ca = codes[static_cast<std::size_t>(a)], cb = codes[static_cast<std::size_t>(b)];
    return ca != cb ? ca < cb : a < b;
  });
  return order;
}

void validate_permutation(const std::vector<Index>& order, Index n) {
  if (static_cast<Index>(order.size()) != n)
    throw InvalidArgument("permutation length " + std::to_string(order.size()) +
                          " != sequence length " + std::to_string(n));
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (Index i : order) {
    if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)])
      throw InvalidArgument("order is not a permutation of {0.." + std::to_string(n - 1) +
                            "}");
    seen[static_cast<std::size_t>(i)] = 1;
  }
}

std::vector<Index> inverse_order(const std::vector<Index>& order) {
  validate_permutation(order, static_cast<Index>(order.size()));
  std::vector<Index> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    inv[static_cast<std::size_t>(order[i])] = static_cast<Index>(i);
  return inv;
}

GroupedPoints group_and_order(const PointCloud& cloud, Index n_s, Index k,
                              const MortonConfig& config) {
  std::vector<Index> centroids = farthest_point_sample(cloud, n_s);
  GroupedPoints g = knn_group(cloud, std::move(centroids), k);
  g.morton_codes.resize(g.centroid_indices.size());
  for (std::size_t i = 0; i < g.centroid_indices.size(); ++i)
    g.morton_codes[i] = morton_code_of(cloud.points.row(g.centroid_indices[i]), config);
  g.order = morton_order(cloud, g.centroid_indices, config);
  return g;
}

}  // namespace apf
