// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ffa {

/// Error categories. The numeric values double as process exit codes for the CLI.
enum class ErrorKind : int {
  kGeneric = 1,
  kConfig = 2,
  kStageOrder = 3,
  kMissingData = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  explicit Error(const std::string& what) : Error(ErrorKind::kGeneric, what) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class StageOrderError : public Error {
 public:
  explicit StageOrderError(const std::string& what) : Error(ErrorKind::kStageOrder, what) {}
};

class MissingDataError : public Error {
 public:
  explicit MissingDataError(const std::string& what) : Error(ErrorKind::kMissingData, what) {}
};

/// Raised when a parameter set that must stay frozen during a training stage changed.
class FrozenMutationError : public Error {
 public:
  explicit FrozenMutationError(const std::string& what) : Error(ErrorKind::kGeneric, what) {}
};

#define FFA_CHECK(cond, msg)                                     \
  do {                                                           \
    if (!(cond)) throw ::ffa::Error(std::string(msg));           \
  } while (0)

}  // namespace ffa
