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

#include "apf/data.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace apf {
namespace {

constexpr double kPi = 3.14159265358979323846;

void set_point(PointCloud& cloud, Index i, double x, double y, double z) {
  cloud.points(i, 0) = static_cast<float>(x);
  cloud.points(i, 1) = static_cast<float>(y);
  cloud.points(i, 2) = static_cast<float>(z);
}

}  // namespace

void ClassificationDataset::validate() const {
  if (samples.empty()) throw InvalidArgument("classification dataset is empty");
  if (num_classes < 2) throw InvalidArgument("classification dataset needs at least two classes");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label < 0 || samples[i].label >= num_classes)
      throw InvalidArgument("sample " + std::to_string(i) + " label " +
                            std::to_string(samples[i].label) + " outside [0," +
                            std::to_string(num_classes) + ")");
    samples[i].cloud.validate();
  }
}

std::vector<std::vector<Index>> ClassificationDataset::by_class() const {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < samples.size(); ++i)
    out[static_cast<std::size_t>(samples[i].label)].push_back(static_cast<Index>(i));
  return out;
}

void SegmentationDataset::validate() const {
  if (samples.empty()) throw InvalidArgument("segmentation dataset is empty");
  if (num_parts < 2) throw InvalidArgument("segmentation dataset needs at least two parts");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    s.cloud.validate();
    if (static_cast<Index>(s.labels.size()) != s.cloud.size())
      throw InvalidArgument("sample " + std::to_string(i) + " has " +
                            std::to_string(s.labels.size()) + " labels for " +
                            std::to_string(s.cloud.size()) + " points");
    for (Index l : s.labels)
      if (l < 0 || l >= num_parts)
        throw InvalidArgument("sample " + std::to_string(i) + " part label " + std::to_string(l) +
                              " outside [0," + std::to_string(num_parts) + ")");
  }
}

const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::torus: return "torus";
  }
  return "?";
}

PointCloud sample_shape(ShapeKind kind, Index n_points, Rng& rng) {
  if (n_points < 1) throw InvalidArgument("sample_shape: need at least one point");
  PointCloud cloud;
  cloud.points.resize(n_points, 3);
  switch (kind) {
    case ShapeKind::sphere: {
      // Unit sphere surface, uniform via normalized Gaussians.
      for (Index i = 0; i < n_points; ++i) {
        double x = rng.normal(), y = rng.normal(), z = rng.normal();
        double r = std::sqrt(x * x + y * y + z * z);
        while (r < 1e-12) {
          x = rng.normal();
          y = rng.normal();
          z = rng.normal();
          r = std::sqrt(x * x + y * y + z * z);
        }
        set_point(cloud, i, x / r, y / r, z / r);
      }
      break;
    }
    case ShapeKind::cube: {
      // Surface of the axis-aligned cube [-1,1]^3: pick a face, then a
      // uniform in-face position. Faces have equal area.
      for (Index i = 0; i < n_points; ++i) {
        const std::uint64_t face = rng.uniform_index(6);
        const double u = rng.uniform(-1.0, 1.0);
        const double v = rng.uniform(-1.0, 1.0);
        const double w = (face % 2 == 0) ? 1.0 : -1.0;
        if (face / 2 == 0)
          set_point(cloud, i, w, u, v);
        else if (face / 2 == 1)
          set_point(cloud, i, u, w, v);
        else
          set_point(cloud, i, u, v, w);
      }
      break;
    }
    case ShapeKind::cylinder: {
      // Radius 1, height 2, with caps. Areas: lateral 4*pi, caps pi each,
      // so the lateral surface takes 2/3 of the samples in expectation.
      for (Index i = 0; i < n_points; ++i) {
        const double pick = rng.uniform() * 6.0;
        const double theta = rng.uniform(0.0, 2.0 * kPi);
        if (pick < 4.0) {
          set_point(cloud, i, std::cos(theta), std::sin(theta), rng.uniform(-1.0, 1.0));
        } else {
          const double r = std::sqrt(rng.uniform());
          set_point(cloud, i, r * std::cos(theta), r * std::sin(theta), pick < 5.0 ? 1.0 : -1.0);
        }
      }
      break;
    }
    case ShapeKind::torus: {
      // Ring radius 0.7, tube radius 0.3; the tube angle is rejection
      // sampled so the surface density is uniform in area.
      const double ring = 0.7, tube = 0.3;
      for (Index i = 0; i < n_points; ++i) {
        const double theta = rng.uniform(0.0, 2.0 * kPi);
        double phi = rng.uniform(0.0, 2.0 * kPi);
        while (rng.uniform() * (ring + tube) > ring + tube * std::cos(phi))
          phi = rng.uniform(0.0, 2.0 * kPi);
        const double radial = ring + tube * std::cos(phi);
        set_point(cloud, i, radial * std::cos(theta), radial * std::sin(theta),
                  tube * std::sin(phi));
      }
      break;
    }
  }
  return cloud;
}

ClassificationDataset make_shape_dataset(std::uint64_t seed,
                                         const std::vector<ShapeKind>& classes, Index per_class,
                                         Index points_per_cloud) {
  if (classes.size() < 2) throw InvalidArgument("make_shape_dataset: need at least two classes");
  if (per_class < 1) throw InvalidArgument("make_shape_dataset: per_class must be positive");
  ClassificationDataset out;
  out.num_classes = static_cast<Index>(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    Rng rng(derive_seed(seed, std::string("shape-") + to_string(classes[c]) + "-" +
                                  std::to_string(c)));
    for (Index i = 0; i < per_class; ++i) {
      ClassificationSample s;
      s.cloud = sample_shape(classes[c], points_per_cloud, rng);
      s.label = static_cast<Index>(c);
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

ClassificationDataset load_classification(const std::vector<ManifestEntry>& entries,
                                          Index num_classes) {
  if (entries.empty()) throw InvalidArgument("no samples");
  ClassificationDataset out;
  Index max_label = -1;
  for (const auto& e : entries) {
    ClassificationSample s;
    if (e.path.size() >= 4 && e.path.substr(e.path.size() - 4) == ".off") {
      s.cloud = load_off(e.path);
    } else {
      s.cloud = read_point_binary(e.path).cloud;
    }
    if (e.label < 0)
      throw InvalidArgument("manifest entry '" + e.path + "' carries no class label");
    s.label = e.label;
    max_label = std::max(max_label, s.label);
    out.samples.push_back(std::move(s));
  }
  out.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  out.validate();
  return out;
}

SegmentationDataset load_segmentation(const std::vector<ManifestEntry>& entries,
                                      Index num_parts) {
  if (entries.empty()) throw InvalidArgument("no samples");
  SegmentationDataset out;
  Index max_label = -1;
  for (const auto& e : entries) {
    LabeledCloud lc = read_point_binary(e.path);
    SegmentationSample s;
    s.cloud = std::move(lc.cloud);
    std::vector<std::int32_t> raw = std::move(lc.point_labels);
    if (!e.label_path.empty() && e.label_path != e.path)
      raw = read_point_binary(e.label_path).point_labels;
    if (static_cast<Index>(raw.size()) != s.cloud.size())
      throw InvalidArgument("sample '" + e.path + "' has " + std::to_string(raw.size()) +
                            " labels for " + std::to_string(s.cloud.size()) + " points");
    s.labels.reserve(raw.size());
    for (std::int32_t l : raw) {
      s.labels.push_back(l);
      max_label = std::max<Index>(max_label, l);
    }
    out.samples.push_back(std::move(s));
  }
  out.num_parts = num_parts > 0 ? num_parts : max_label + 1;
  out.validate();
  return out;
}

}  // namespace apf
