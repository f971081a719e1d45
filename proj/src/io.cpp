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

#include "apf/io.hpp"

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace apf {
namespace {

constexpr std::uint64_t kMaxVertices = 2'000'000;  // allocation guard for OFF
constexpr std::uint64_t kMaxPoints = 1'000'000'000;
constexpr std::uint32_t kMaxFeatureWidth = 65'535;
constexpr std::uint32_t kMaxLabelWidth = 16;

// ---- little-endian scalar serialization -----------------------------------

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_i32(std::string& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

// Cursor over an in-memory file; every read is bounds-checked and raises
// IoError(truncated) past the end.
struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;
  const char* what;  // format name for error messages

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw IoError(IoErrc::truncated, std::string(what) + " file ends inside a field at byte " +
                                           std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(bytes[pos++]);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes.substr(pos, n));
    pos += n;
    return s;
  }
};

void check_magic(Reader& r, const char magic[5]) {
  if (r.str(4) != magic)
    throw IoError(IoErrc::bad_magic, std::string("expected magic '") + magic + "'");
}

// ---- OFF parsing -----------------------------------------------------------

// Significant lines only: blank lines and # comments are skipped, CR
// stripped. line_no is 1-based and tracks the position in the raw text.
struct LineScanner {
  std::string_view text;
  std::size_t pos = 0;
  std::size_t line_no = 0;

  // Returns false at end of input; otherwise sets `line` to the next
  // significant line and `line_no` to its number.
  bool next(std::string_view& line) {
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      std::string_view raw = text.substr(pos, end - pos);
      pos = end + (end < text.size() ? 1 : 0);
      ++line_no;
      if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
      std::size_t first = raw.find_first_not_of(" \t");
      if (first == std::string_view::npos) continue;
      if (raw[first] == '#') continue;
      line = raw;
      return true;
    }
    return false;
  }
};

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::uint64_t parse_count(std::string_view field, std::size_t line_no, const char* which) {
  std::uint64_t v = 0;
  if (field.empty())
    throw ParseError(std::string("missing ") + which + " count", line_no);
  for (char c : field) {
    if (c < '0' || c > '9')
      throw ParseError(std::string("non-numeric ") + which + " count '" + std::string(field) +
                           "'",
                       line_no);
    if (v > (std::numeric_limits<std::uint64_t>::max() - 9) / 10)
      throw ParseError(std::string(which) + " count overflows", line_no);
    v = v * 10 + std::uint64_t(c - '0');
  }
  return v;
}

float parse_coord(std::string_view field, std::size_t line_no) {
  std::string buf(field);
  char* end = nullptr;
  errno = 0;
  const float v = std::strtof(buf.c_str(), &end);
  if (end != buf.c_str() + buf.size() || buf.empty())
    throw ParseError("non-numeric vertex field '" + buf + "'", line_no);
  if (errno == ERANGE || !std::isfinite(v))
    throw ParseError("vertex coordinate out of range '" + buf + "'", line_no);
  return v;
}

}  // namespace

PointCloud parse_off(std::string_view text) {
  LineScanner scan{text};
  std::string_view line;
  if (!scan.next(line)) throw ParseError("empty input, expected OFF header", 1);

  std::size_t first = line.find_first_not_of(" \t");
  std::string_view header = line.substr(first);
  if (header.substr(0, 3) != "OFF")
    throw ParseError("header does not start with OFF", scan.line_no);

  // Counts either follow on the header line (including glued "OFF4 0 0") or
  // occupy the next significant line.
  std::string_view counts_part = header.substr(3);
  std::size_t counts_line = scan.line_no;
  auto fields = split_fields(counts_part);
  if (fields.empty()) {
    if (!scan.next(line)) throw ParseError("missing counts line", scan.line_no + 1);
    counts_line = scan.line_no;
    fields = split_fields(line);
  }
  if (fields.size() != 3)
    throw ParseError("counts line must hold vertex, face, and edge counts", counts_line);
  const std::uint64_t nv = parse_count(fields[0], counts_line, "vertex");
  parse_count(fields[1], counts_line, "face");
  parse_count(fields[2], counts_line, "edge");
  if (nv == 0) throw ParseError("mesh declares zero vertices", counts_line);
  if (nv > kMaxVertices)
    throw ParseError("vertex count " + std::to_string(nv) + " exceeds limit", counts_line);

  PointCloud cloud;
  cloud.points.resize(static_cast<Index>(nv), 3);
  for (std::uint64_t i = 0; i < nv; ++i) {
    if (!scan.next(line))
      throw ParseError("expected vertex " + std::to_string(i + 1) + " of " + std::to_string(nv),
                       scan.line_no + 1);
    auto f = split_fields(line);
    if (f.size() < 3)
      throw ParseError("vertex line has " + std::to_string(f.size()) + " fields, need 3",
                       scan.line_no);
    for (int a = 0; a < 3; ++a)
      cloud.points(static_cast<Index>(i), a) = parse_coord(f[std::size_t(a)], scan.line_no);
  }
  return cloud;
}

PointCloud load_off(const std::string& path) { return parse_off(read_file_bytes(path)); }

// ---- point binary ----------------------------------------------------------

void write_point_binary(const PointCloud& cloud, const std::vector<std::int32_t>& point_labels,
                        const std::string& path) {
  cloud.validate();
  if (!point_labels.empty() && static_cast<Index>(point_labels.size()) != cloud.size())
    throw InvalidArgument("label count " + std::to_string(point_labels.size()) +
                          " != point count " + std::to_string(cloud.size()));
  const std::uint32_t c = static_cast<std::uint32_t>(cloud.feature_width());
  const std::uint32_t label_width = point_labels.empty() ? 0u : 1u;

  std::string out;
  out.reserve(24 + std::size_t(cloud.size()) * (3 + c) * 4 + point_labels.size() * 4);
  out += "APFP";
  put_u32(out, 1);
  put_u64(out, static_cast<std::uint64_t>(cloud.size()));
  put_u32(out, c);
  put_u32(out, label_width);
  for (Index i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) put_f32(out, cloud.points(i, a));
    for (std::uint32_t j = 0; j < c; ++j) put_f32(out, cloud.features(i, static_cast<Index>(j)));
  }
  for (std::int32_t l : point_labels) put_i32(out, l);
  write_file_bytes(path, out);
}

LabeledCloud read_point_binary(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  Reader r{bytes, 0, "point-binary"};
  check_magic(r, "APFP");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw IoError(IoErrc::version_mismatch,
                  "point-binary version " + std::to_string(version) + ", expected 1");
  const std::uint64_t n = r.u64();
  const std::uint32_t c = r.u32();
  const std::uint32_t label_width = r.u32();
  if (n == 0 || n > kMaxPoints)
    throw IoError(IoErrc::malformed, "point count " + std::to_string(n) + " outside [1," +
                                         std::to_string(kMaxPoints) + "]");
  if (c > kMaxFeatureWidth)
    throw IoError(IoErrc::malformed, "feature width " + std::to_string(c) + " too large");
  if (label_width > kMaxLabelWidth)
    throw IoError(IoErrc::malformed, "label width " + std::to_string(label_width) + " too large");
  if (label_width > 1)
    throw IoError(IoErrc::malformed,
                  "label width " + std::to_string(label_width) + " unsupported, expected 0 or 1");

  // Full size check before any allocation.
  const std::uint64_t expect = 24 + n * (3 + std::uint64_t(c)) * 4 + n * label_width * 4;
  if (bytes.size() < expect)
    throw IoError(IoErrc::truncated, "payload needs " + std::to_string(expect) + " bytes, file has " +
                                         std::to_string(bytes.size()));
  if (bytes.size() > expect)
    throw IoError(IoErrc::size_mismatch, "file has " + std::to_string(bytes.size() - expect) +
                                             " trailing bytes");

  LabeledCloud out;
  out.cloud.points.resize(static_cast<Index>(n), 3);
  if (c > 0) out.cloud.features.resize(static_cast<Index>(n), static_cast<Index>(c));
  for (std::uint64_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) out.cloud.points(static_cast<Index>(i), a) = r.f32();
    for (std::uint32_t j = 0; j < c; ++j)
      out.cloud.features(static_cast<Index>(i), static_cast<Index>(j)) = r.f32();
  }
  if (label_width == 1) {
    out.point_labels.resize(static_cast<std::size_t>(n));
    for (auto& l : out.point_labels) l = r.i32();
  }
  return out;
}

// ---- checkpoint ------------------------------------------------------------

void write_checkpoint(const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                      const std::string& path) {
  std::set<std::string> names;
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.size() > 4096)
      throw IoError(IoErrc::malformed, "tensor name empty or too long");
    if (!names.insert(name).second)
      throw IoError(IoErrc::duplicate_name, "tensor '" + name + "' appears twice");
    if (t == nullptr) throw InternalError("null tensor for '" + name + "'");
  }

  // Directory size first, so offsets are known before payloads are written.
  std::uint64_t dir_size = 4 + 4 + 8;
  for (const auto& [name, t] : tensors)
    dir_size += 4 + name.size() + 4 + 4 + 8 * t->shape().size() + 1 + 8;

  std::string out;
  out += "APFW";
  put_u32(out, 1);
  put_u64(out, tensors.size());
  std::uint64_t offset = dir_size;
  for (const auto& [name, t] : tensors) {
    offset = (offset + 7) & ~std::uint64_t(7);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 0);  // dtype tag: float32
    put_u32(out, static_cast<std::uint32_t>(t->shape().size()));
    for (Index d : t->shape()) put_u64(out, static_cast<std::uint64_t>(d));
    out.push_back(t->requires_grad() ? char(1) : char(0));
    put_u64(out, offset);
    offset += std::uint64_t(t->numel()) * 4;
  }
  for (const auto& [name, t] : tensors) {
    while (out.size() % 8 != 0) out.push_back('\0');
    for (Index i = 0; i < t->numel(); ++i) put_f32(out, t->at(i));
  }
  write_file_bytes(path, out);
}

std::map<std::string, Tensor<float>> read_checkpoint(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  Reader r{bytes, 0, "checkpoint"};
  check_magic(r, "APFW");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw IoError(IoErrc::version_mismatch,
                  "checkpoint version " + std::to_string(version) + ", expected 1");
  const std::uint64_t count = r.u64();
  if (count > 1'000'000)
    throw IoError(IoErrc::malformed, "tensor count " + std::to_string(count) + " too large");

  struct Entry {
    std::string name;
    std::vector<Index> shape;
    bool trainable;
    std::uint64_t offset;
    std::uint64_t byte_size;
  };
  std::vector<Entry> dir;
  dir.reserve(count);
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t name_len = r.u32();
    if (name_len == 0 || name_len > 4096)
      throw IoError(IoErrc::malformed, "tensor name length " + std::to_string(name_len));
    e.name = r.str(name_len);
    if (!names.insert(e.name).second)
      throw IoError(IoErrc::duplicate_name, "tensor '" + e.name + "' appears twice");
    const std::uint32_t dtype = r.u32();
    if (dtype != 0)
      throw IoError(IoErrc::unknown_dtype,
                    "dtype tag " + std::to_string(dtype) + " for '" + e.name + "'");
    const std::uint32_t rank = r.u32();
    if (rank > 2)
      throw IoError(IoErrc::malformed, "rank " + std::to_string(rank) + " for '" + e.name + "'");
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64();
      if (dim == 0 || dim > std::uint64_t(1) << 32)
        throw IoError(IoErrc::malformed, "dimension " + std::to_string(dim) + " for '" + e.name + "'");
      e.shape.push_back(static_cast<Index>(dim));
      numel *= dim;
    }
    if (numel > (std::uint64_t(1) << 33))
      throw IoError(IoErrc::malformed, "tensor '" + e.name + "' too large");
    const std::uint8_t flag = r.u8();
    if (flag > 1)
      throw IoError(IoErrc::malformed, "trainable flag " + std::to_string(flag) + " for '" +
                                           e.name + "'");
    e.trainable = flag == 1;
    e.offset = r.u64();
    e.byte_size = numel * 4;
    dir.push_back(std::move(e));
  }

  // Offsets must begin past the directory, stay strictly increasing, stay
  // 8-byte aligned, never overlap, and end exactly at end of file.
  std::uint64_t prev_end = r.pos;
  for (const Entry& e : dir) {
    if (e.offset % 8 != 0)
      throw IoError(IoErrc::malformed, "offset of '" + e.name + "' not 8-byte aligned");
    if (e.offset < prev_end || e.offset - prev_end > 7)
      throw IoError(IoErrc::offset_overlap,
                    "tensor '" + e.name + "' at offset " + std::to_string(e.offset) +
                        " overlaps or leaves a gap before byte " + std::to_string(prev_end));
    if (e.offset + e.byte_size > bytes.size())
      throw IoError(IoErrc::truncated, "tensor '" + e.name + "' extends past end of file");
    prev_end = e.offset + e.byte_size;
  }
  if (prev_end != bytes.size())
    throw IoError(IoErrc::size_mismatch, "file has " + std::to_string(bytes.size() - prev_end) +
                                             " trailing bytes");

  std::map<std::string, Tensor<float>> out;
  for (const Entry& e : dir) {
    Tensor<float> t = e.shape.empty() ? Tensor<float>::scalar(0.0f) : Tensor<float>::zeros(e.shape);
    Reader pr{bytes, static_cast<std::size_t>(e.offset), "checkpoint"};
    for (Index i = 0; i < t.numel(); ++i) t.at(i) = pr.f32();
    t.set_requires_grad(e.trainable);
    out.emplace(e.name, std::move(t));
  }
  return out;
}

// ---- manifest ---------------------------------------------------------------

std::vector<ManifestEntry> read_manifest(const std::string& path, ManifestKind kind) {
  const std::string bytes = read_file_bytes(path);
  LineScanner scan{bytes};
  std::string_view line;
  std::vector<ManifestEntry> out;
  while (scan.next(line)) {
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0 || tab + 1 >= line.size())
      throw ParseError("expected 'path<TAB>label' record", scan.line_no);
    ManifestEntry e;
    e.path = std::string(line.substr(0, tab));
    const std::string second(line.substr(tab + 1));
    if (kind == ManifestKind::classification) {
      char* end = nullptr;
      errno = 0;
      const long v = std::strtol(second.c_str(), &end, 10);
      if (end != second.c_str() + second.size() || errno == ERANGE || v < 0 ||
          v > std::numeric_limits<std::int32_t>::max())
        throw ParseError("class label '" + second + "' is not a non-negative integer",
                         scan.line_no);
      e.label = static_cast<std::int32_t>(v);
    } else {
      e.label_path = second;
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, ManifestKind kind,
                    const std::string& path) {
  std::string out;
  for (const ManifestEntry& e : entries) {
    out += e.path;
    out.push_back('\t');
    out += kind == ManifestKind::classification ? std::to_string(e.label) : e.label_path;
    out.push_back('\n');
  }
  write_file_bytes(path, out);
}

// ---- raw file helpers --------------------------------------------------------

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open '" + path + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError(IoErrc::open_failed, "read failure on '" + path + "'");
  return std::move(buf).str();
}

void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::open_failed, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError(IoErrc::write_failed, "write failure on '" + path + "'");
}

}  // namespace apf
