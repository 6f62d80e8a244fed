// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cropr {

/// Tensor shapes that do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row, label or position index outside the valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model, task or run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Pruning schedule inconsistent with the model it is applied to.
class ScheduleError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Token positions do not reassemble into the original grid.
class FusionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation requested on a module variant that does not support it.
class UnsupportedVariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed checkpoint, dump or other on-disk artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cropr
