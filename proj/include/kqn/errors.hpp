#pragma once

#include <stdexcept>
#include <string>

namespace kqn {

// Shape mismatch between operands of a matrix or model operation.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A batch with zero samples where at least one is required.
struct EmptyBatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Symmetric factorization hit a non-positive or non-finite pivot.
struct NotPositiveDefiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotSymmetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Curvature pair with s'y <= 0 (or y'Hy <= 0) fed to an update that needs positivity.
struct CurvatureConditionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Zero s or y handed to a damping stage; callers treat this as "skip the update".
struct DegeneratePairError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value produced during a pass; carries the 1-based layer index (0 = loss).
struct NumericalDivergenceError : std::runtime_error {
  int layer;
  NumericalDivergenceError(const std::string& msg, int layer_index)
      : std::runtime_error(msg), layer(layer_index) {}
};

// Malformed input file (IDX or CSV).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or unknown experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kqn
