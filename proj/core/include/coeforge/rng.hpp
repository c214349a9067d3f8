#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace coeforge {

/// Seeded generator with platform-independent derived distributions.
///
/// The standard library's distributions are implementation-defined, so every
/// derived draw here is spelled out on top of the raw mt19937_64 stream:
///   - uniform_index(n): rejection sampling, reject raw draws >= 2^64 - (2^64 mod n),
///     return draw mod n.
///   - uniform01(): top 53 bits of one raw draw scaled by 2^-53.
///   - normal(): Box-Muller on two uniform01 draws, no caching of the second variate.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  std::size_t uniform_index(std::size_t n);
  double uniform01();
  double normal(double mean = 0.0, double stddev = 1.0);

  /// Fisher-Yates from the back using uniform_index.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
};

}  // namespace coeforge
