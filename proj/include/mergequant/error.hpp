// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mq {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension or shape contract violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data (containers, calibration sets).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numeric failure: accumulator overflow, divergence, non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename E = ShapeError>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace detail
}  // namespace mq
