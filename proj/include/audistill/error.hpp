#pragma once

#include <stdexcept>
#include <string>

namespace audistill {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed container (WAV, feature file, checkpoint, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input using a codec or layout we do not read.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (band edges, architecture, class population).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition (non-finite samples, bad loss rank).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Signal shorter than a single analysis frame.
class TooShortError : public Error {
 public:
  using Error::Error;
};

/// Trajectory segment whose start and target parameters coincide.
class StagnantTeacherError : public Error {
 public:
  using Error::Error;
};

/// Teacher buffer whose trajectories disagree on architecture or length.
class BufferIntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace audistill
