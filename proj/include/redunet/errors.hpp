#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace redunet {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed arguments: shape mismatches, non-finite entries, unknown labels.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Input that is well-formed but cannot be normalized (zero class, zero vector).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

/// A factorization failed or a quantity left its admissible range.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Non-finite features appeared while constructing a layer.
class NumericalDivergence : public NumericalError {
 public:
  NumericalDivergence(std::size_t layer, const std::string& what)
      : NumericalError("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

/// Stored parameters disagree with each other (spectra, counts vs alpha_j).
class InconsistentParameter : public Error {
 public:
  using Error::Error;
};

/// Dataset or model file does not follow its binary layout.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace redunet
