#pragma once

#include <stdexcept>
#include <string>

namespace mhelab {

// Base class for everything this library throws on contract violations.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape / dimension mismatches. Messages always name the offending shapes.
class DimError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite input is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Precondition violations that are not shape related (non-scalar loss,
// non-positive sizes, objective/architecture mismatch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid ModelConfig / TrainConfig.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Metric domain violations (non-positive reference score, zero parameter delta).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Filesystem problems: missing file, short read, failed write.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed file content (bad magic, unparseable header or CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Recognized file family but unsupported version.
class VersionError : public Error {
 public:
  using Error::Error;
};

// Training diverged (NaN/Inf loss); carries step diagnostics in the message.
class DivergedError : public Error {
 public:
  using Error::Error;
};

}  // namespace mhelab
