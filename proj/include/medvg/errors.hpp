#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medvg {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateGeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unbalanced or nested bracket tokens in a generated response.
struct MalformedResponseError : std::runtime_error {
  std::size_t index;
  MalformedResponseError(const std::string& what, std::size_t idx)
      : std::runtime_error(what), index(idx) {}
};

struct SpanLayoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Backend call failed at the transport level; retryable.
struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CleaningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace medvg
