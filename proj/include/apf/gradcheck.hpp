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

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "apf/common.hpp"
#include "apf/tensor.hpp"

namespace apf {

template <typename Scalar>
struct GradCheckEntry {
  std::string name;
  Scalar max_rel = 0;      // worst relative error in this tensor
  Scalar analytic = 0;     // analytic gradient at the worst element
  Scalar numeric = 0;      // central difference at the worst element
  Index element = 0;       // flat index of the worst element
};

template <typename Scalar>
struct GradCheckReport {
  std::vector<GradCheckEntry<Scalar>> entries;
  Scalar max_rel = 0;
  std::string worst_name;

  bool within(Scalar tol) const { return max_rel < tol; }
};

/// Central-difference audit of reverse-mode gradients.
///
/// `loss(with_grad)` must rebuild the computation from the current tensor
/// contents and return the scalar loss; when with_grad is set it must also
/// run backward so gradients land on the given tensors. Frozen tensors are
/// excluded from the report. Relative error uses max(1, |numeric|,
/// |analytic|) in the denominator so near-zero gradients are compared
/// absolutely.
template <typename Scalar, typename LossFn>
GradCheckReport<Scalar> finite_diff_check(
    const std::vector<std::pair<std::string, Tensor<Scalar>*>>& all_params, LossFn&& loss,
    Scalar h = Scalar(1e-4)) {
  std::vector<std::pair<std::string, Tensor<Scalar>*>> params;
  for (const auto& p : all_params)
    if (p.second->requires_grad()) params.push_back(p);
  for (const auto& [name, t] : params) t->zero_grad();
  loss(true);

  std::vector<std::vector<Scalar>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, t] : params) {
    if (t->grad().size() != t->storage().size())
      throw InternalError("finite_diff_check: no gradient on '" + name + "'");
    analytic.push_back(t->grad());
  }

  GradCheckReport<Scalar> report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<Scalar>& t = *params[p].second;
    GradCheckEntry<Scalar> entry;
    entry.name = params[p].first;
    for (Index i = 0; i < t.numel(); ++i) {
      const Scalar keep = t.at(i);
      t.at(i) = keep + h;
      const Scalar up = loss(false);
      t.at(i) = keep - h;
      const Scalar down = loss(false);
      t.at(i) = keep;
      const Scalar fd = (up - down) / (Scalar(2) * h);
      const Scalar ad = analytic[p][static_cast<std::size_t>(i)];
      const Scalar denom = std::max({Scalar(1), std::abs(fd), std::abs(ad)});
      const Scalar rel = std::abs(fd - ad) / denom;
      if (rel > entry.max_rel) {
        entry.max_rel = rel;
        entry.analytic = ad;
        entry.numeric = fd;
        entry.element = i;
      }
    }
    if (entry.max_rel > report.max_rel) {
      report.max_rel = entry.max_rel;
      report.worst_name = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace apf
