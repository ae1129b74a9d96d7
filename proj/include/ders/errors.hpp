// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ders {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands. Messages carry both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain (probability, bit width, rank...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment or upcycling configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation requires model state that is absent (e.g. no init-base record).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced during forward/backward.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Structurally invalid data: bad checkpoint bytes, broken delta invariants.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint written by a newer format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

}  // namespace ders
