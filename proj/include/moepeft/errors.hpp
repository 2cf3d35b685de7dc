// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moepeft {

// Base for everything thrown by the library. The CLI maps subclasses to
// exit codes, so new error kinds should subclass rather than reuse.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape algebra violations (matmul inner dims, broadcast suffix, ...).
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

// Out-of-range token ids and the like.
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& msg) : Error("index error: " + msg) {}
};

// API contract violations (double backward, non-scalar loss, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

// Bad configuration values or unknown names.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Malformed runtime inputs (overlength sequences, empty options, ...).
class InputError : public Error {
 public:
  explicit InputError(const std::string& msg) : Error("input error: " + msg) {}
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, long step)
      : Error("divergence error at step " + std::to_string(step) + ": " + msg), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Filesystem failures, always with path context.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

}  // namespace moepeft
