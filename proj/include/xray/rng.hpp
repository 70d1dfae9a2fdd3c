#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>

namespace xray {

/// Seeded PRNG shared by every randomized operation.
///
/// Engine: std::mt19937_64 constructed directly from the 64-bit seed.
/// Floats: uniform() = (next_u64() >> 11) * 2^-53, in [0, 1).
/// Integers: below(n) rejects draws >= the largest multiple of n, then takes x % n.
/// Normals: Box-Muller on two uniform() draws (cosine branch only).
/// Shuffles: Fisher-Yates from the back, swapping i with below(i + 1).
/// Independent streams: Rng::derive(seed, stream) mixes both through splitmix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  template <typename Container>
  void shuffle(Container& c) {
    shuffle(c.begin(), c.end());
  }

  static std::uint64_t splitmix64(std::uint64_t x);
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace xray
