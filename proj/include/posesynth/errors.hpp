#pragma once

#include <stdexcept>
#include <string>

namespace posesynth {

// Base class for all error conditions raised by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ZeroQuaternion : Error {
  using Error::Error;
};

struct NotARotation : Error {
  using Error::Error;
};

struct InvalidDepth : Error {
  using Error::Error;
};

struct EmptyScene : Error {
  using Error::Error;
};

struct NoCandidates : Error {
  using Error::Error;
};

// File-level corruption; the message names the offending path.
struct CorruptFile : Error {
  using Error::Error;
};

struct CorruptDepth : CorruptFile {
  using CorruptFile::CorruptFile;
};

struct DegenerateAlignment : Error {
  using Error::Error;
};

struct NoSources : Error {
  using Error::Error;
};

struct NonFiniteActivation : Error {
  using Error::Error;
};

struct NonFiniteGradient : Error {
  using Error::Error;
};

struct DivergedLoss : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace posesynth
