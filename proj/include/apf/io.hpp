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

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apf/common.hpp"
#include "apf/geometry.hpp"
#include "apf/tensor.hpp"

namespace apf {

/// Extracts the vertex list of an OFF mesh; faces are ignored. Tolerates the
/// common variant where the counts share the header line ("OFF4 0 0" or
/// "OFF 4 0 0"), skips comment (#) and blank lines, and reports every
/// malformation as a ParseError carrying a 1-based line number.
PointCloud parse_off(std::string_view text);

/// parse_off over a file's content. Throws IoError(open_failed) when the
/// file cannot be read.
PointCloud load_off(const std::string& path);

/// A cloud with optional per-point integer labels (one per point).
struct LabeledCloud {
  PointCloud cloud;
  std::vector<std::int32_t> point_labels;  // empty or exactly N entries
};

/// Binary point container, magic "APFP", version 1, little-endian:
/// header (magic, u32 version, u64 N, u32 C, u32 label_width), then
/// N*(3+C) float32 coordinates+features, then N*label_width int32 labels.
/// label_width is 1 when per-point labels are present, otherwise 0.
void write_point_binary(const PointCloud& cloud, const std::vector<std::int32_t>& point_labels,
                        const std::string& path);

/// Reads an APFP file. Header arithmetic is validated against the true file
/// size before any allocation; failures raise IoError with a distinct code
/// (bad_magic, version_mismatch, truncated, size_mismatch, malformed).
LabeledCloud read_point_binary(const std::string& path);

/// Checkpoint container, magic "APFW", version 1, little-endian. A tensor
/// directory (name, dtype tag 0 = float32, rank, dims, trainable flag,
/// absolute byte offset) precedes raw payloads, each 8-byte aligned.
/// Offsets must be strictly increasing and non-overlapping, names unique.
void write_checkpoint(const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                      const std::string& path);

/// Reads an APFW file, restoring shapes, data, and requires_grad flags.
/// Directory arithmetic is validated before any tensor allocation.
std::map<std::string, Tensor<float>> read_checkpoint(const std::string& path);

/// One dataset sample: a data file plus either a class label or a path to a
/// per-point label file, depending on the manifest kind.
struct ManifestEntry {
  std::string path;
  std::int32_t label = -1;  // classification manifests
  std::string label_path;   // segmentation manifests
};

enum class ManifestKind { classification, segmentation };

/// Tab-separated manifest, one "path<TAB>label" (classification) or
/// "path<TAB>label_file" (segmentation) record per line. Blank lines and
/// # comments are skipped. Malformed records raise ParseError with the line
/// number.
std::vector<ManifestEntry> read_manifest(const std::string& path, ManifestKind kind);

void write_manifest(const std::vector<ManifestEntry>& entries, ManifestKind kind,
                    const std::string& path);

/// Whole-file helpers used by the formats above.
std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::string_view bytes);

}  // namespace apf
