#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aspd {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was called in the wrong decode mode (e.g. opening a parallel
/// stage while one is already open).
class ModeError : public Error {
 public:
  using Error::Error;
};

/// A branch was addressed that does not exist, is already closed, or is
/// otherwise in the wrong state for the requested operation.
class BranchStateError : public Error {
 public:
  using Error::Error;
};

/// A block list, layout snapshot, or response failed structural validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A configuration struct carries values outside its documented domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor or sequence dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Internal cross-checks failed (cache length vs. mask width and similar).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// The decode-time token protocol was violated in a way the engine cannot
/// repair locally.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Sampling could not produce a token (e.g. every candidate was forbidden).
class SamplingError : public Error {
 public:
  using Error::Error;
};

/// A judge transport failed after exhausting its retry budget.
class JudgeTransportError : public Error {
 public:
  using Error::Error;
};

/// The curation pipeline hit an unrecoverable condition for a whole run
/// (individual samples degrade gracefully instead of throwing this).
class PipelineError : public Error {
 public:
  using Error::Error;
};

/// Syntax error while parsing a tagged response.  Carries the byte offset of
/// the failure and a short description of what was expected there.
class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& expected)
      : Error("parse error at byte " + std::to_string(offset) + ": expected " +
              expected),
        offset_(offset),
        expected_(expected) {}

  std::size_t offset() const { return offset_; }
  const std::string& expected() const { return expected_; }

 private:
  std::size_t offset_;
  std::string expected_;
};

}  // namespace aspd
