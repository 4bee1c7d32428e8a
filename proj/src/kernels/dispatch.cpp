// SPDX-License-Identifier: Apache-2.0
#include "mlfl/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace mlfl::kernels {
namespace {

const Backend* pick() {
  if (const char* e = std::getenv("MLFL_KERNELS")) {
    for (const Backend* b : all())
      if (std::strcmp(b->name, e) == 0) return b;
    // Unknown or unavailable name: fall through to auto-detection.
  }
#if defined(MLFL_HAVE_AVX2)
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
    return &avx2::backend;
#endif
#if defined(MLFL_HAVE_NEON)
  return &neon::backend;
#endif
  return &scalar::backend;
}

}  // namespace

const Backend& active() {
  static const Backend* chosen = pick();
  return *chosen;
}

std::vector<const Backend*> all() {
  std::vector<const Backend*> v{&scalar::backend};
#if defined(MLFL_HAVE_AVX2)
  v.push_back(&avx2::backend);
#endif
#if defined(MLFL_HAVE_NEON)
  v.push_back(&neon::backend);
#endif
  return v;
}

}  // namespace mlfl::kernels
