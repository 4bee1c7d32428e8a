// SPDX-License-Identifier: Apache-2.0
// Seeded generator with hand-rolled variate transforms. mt19937_64 output is
// pinned by the standard, but std::uniform_real_distribution and
// std::normal_distribution are not, so every draw here goes through fixed
// arithmetic to keep sequences identical across compilers and platforms.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mlfl {

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // [0,1) with 53-bit resolution
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; the second variate of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform01();  // (0,1], keeps log finite
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // i in [0, n)
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

  // Independent child stream; deterministic in (seed, tag) and insensitive to
  // how many draws the parent has made.
  SeededRng fork(std::uint64_t tag) const {
    std::uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ull * (tag + 1));
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    x = x ^ (x >> 31);
    return SeededRng(x);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Fisher-Yates with the pinned engine; std::shuffle's draw pattern is
// implementation-defined, this is not.
template <class T>
void shuffle(std::vector<T>& v, SeededRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = rng.index(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace mlfl
