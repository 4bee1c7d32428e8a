// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mlfl {

// Field energy below the degeneracy threshold where spectral moments stop
// meaning anything.
struct DegenerateFieldError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Nonfinite field during propagation; z is the position where it blew up.
struct SolverDivergence : std::runtime_error {
  SolverDivergence(const std::string& msg, double z_pos)
      : std::runtime_error(msg), z(z_pos) {}
  double z;
};

// Nonfinite gradient reached an optimizer update.
struct NonfiniteGradient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad or unknown keys, wrong types, out-of-range values in a config file.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unusable dataset: empty, missing history, malformed records.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mlfl
