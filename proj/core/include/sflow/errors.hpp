#pragma once

#include <stdexcept>
#include <string>

namespace sflow {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct DegenerateScale : Error {
  using Error::Error;
};
struct DegenerateHomography : Error {
  using Error::Error;
};
struct RayParallelToPlane : Error {
  using Error::Error;
};
struct LogSingularity : Error {
  using Error::Error;
};
struct ImageTooSmall : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct EmptyMatchField : Error {
  using Error::Error;
};
struct NoHypothesis : Error {
  using Error::Error;
};
struct SolverFailure : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct DimensionMismatch : Error {
  using Error::Error;
};
struct SpecError : Error {
  using Error::Error;
};

}  // namespace sflow
