// SPDX-License-Identifier: Apache-2.0
// Shared test utilities: slow reference implementations used as oracles, and
// path helpers for fixture lookup.
#pragma once

#include <cmath>
#include <complex>
#include <cstdlib>
#include <string>
#include <vector>

namespace mlfl::testing {

inline std::string source_dir() {
  const char* e = std::getenv("MLFL_SOURCE_DIR");
  return e ? std::string(e) : std::string(".");
}

inline std::string fixture_path(const std::string& name) {
  return source_dir() + "/tests/fixtures/" + name;
}

// O(n^2) DFT with the same convention as the fft in the solver:
// X_k = sum_t x_t exp(-2*pi*i*k*t/n). Oracle for spectra and moments.
inline std::vector<std::complex<double>> slow_dft(const std::vector<std::complex<double>>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> X(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * M_PI * static_cast<double>(k) * static_cast<double>(t) /
                         static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    X[k] = acc;
  }
  return X;
}

inline double rel_err(double got, double want) {
  const double scale = std::max({std::abs(got), std::abs(want), 1e-300});
  return std::abs(got - want) / scale;
}

}  // namespace mlfl::testing
