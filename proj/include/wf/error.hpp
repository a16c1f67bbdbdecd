#pragma once

#include <stdexcept>
#include <string>

namespace wf {

// Shape/dimension disagreements between tensor operands.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model or run configuration (bad layer counts, unknown keys, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated API contract (non-scalar loss, empty mask set, double backward, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or truncated on-disk data.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Index or size outside the supported range (channel >= C_max, ...).
struct RangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace wf
