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

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace apf {

using Index = std::int64_t;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A value fell outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not conform for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A run configuration is inconsistent or contains unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Internal invariant violation; indicates a bug, not bad input.
class InternalError : public Error {
 public:
  using Error::Error;
};

/// Text input could not be parsed; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + msg), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class IoErrc {
  open_failed,
  write_failed,
  bad_magic,
  version_mismatch,
  truncated,
  size_mismatch,
  duplicate_name,
  offset_overlap,
  unknown_dtype,
  malformed,
};

inline const char* to_string(IoErrc c) {
  switch (c) {
    case IoErrc::open_failed: return "open_failed";
    case IoErrc::write_failed: return "write_failed";
    case IoErrc::bad_magic: return "bad_magic";
    case IoErrc::version_mismatch: return "version_mismatch";
    case IoErrc::truncated: return "truncated";
    case IoErrc::size_mismatch: return "size_mismatch";
    case IoErrc::duplicate_name: return "duplicate_name";
    case IoErrc::offset_overlap: return "offset_overlap";
    case IoErrc::unknown_dtype: return "unknown_dtype";
    case IoErrc::malformed: return "malformed";
  }
  return "unknown";
}

/// Binary container errors, tagged with which contract was broken.
class IoError : public Error {
 public:
  IoError(IoErrc code, const std::string& msg)
      : Error(std::string(to_string(code)) + ": " + msg), code_(code) {}

  IoErrc code() const { return code_; }

 private:
  IoErrc code_;
};

}  // namespace apf
