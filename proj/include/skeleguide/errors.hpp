#pragma once

#include <stdexcept>
#include <string>

namespace skeleguide {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

/// Prompt/scene combination that cannot be realised (e.g. sitting without a bench).
struct InconsistencyError : Error {
  using Error::Error;
};

struct UnsupportedError : Error {
  using Error::Error;
};

/// Caller used an API path outside its contract.
struct ContractViolation : Error {
  using Error::Error;
};

struct IoError : Error {
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path(path) {}
  std::string path;
};

/// Malformed keypoint document; `path` is a JSON-path-like locator such as
/// "persons[0].joints.l_wrist".
struct SchemaError : Error {
  SchemaError(std::string p, const std::string& what)
      : Error(p + ": " + what), path(std::move(p)) {}
  std::string path;
};

struct NumericalError : Error {
  NumericalError(long s, const std::string& what)
      : Error("step " + std::to_string(s) + ": " + what), step(s) {}
  long step;
};

/// Checkpoint file problems: bad magic, version, truncation.
struct FormatError : Error {
  using Error::Error;
};

}  // namespace skeleguide
