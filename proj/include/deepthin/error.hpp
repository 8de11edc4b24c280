// Copyright 2026 The DeepThin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deepthin {

/// Operand shapes do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its documented domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The requested configuration is valid but not handled by this code path.
class UnsupportedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pruning schedule asked for something impossible (e.g. density increase).
class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-matrix minimum achievable ratio, reported when planning fails.
struct LowerBoundEntry {
  std::string name;
  double lower_bound = 0.0;
};

/// A compression target cannot be met.
class PlanningError : public std::runtime_error {
 public:
  PlanningError(const std::string& what, std::vector<LowerBoundEntry> bounds)
      : std::runtime_error(what), bounds_(std::move(bounds)) {}

  const std::vector<LowerBoundEntry>& lower_bounds() const noexcept { return bounds_; }

 private:
  std::vector<LowerBoundEntry> bounds_;
};

/// Malformed serialized model; `offset()` is the byte position of the failure.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace deepthin
