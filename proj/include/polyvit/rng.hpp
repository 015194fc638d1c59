#pragma once

// Deterministic random streams. Every consumer of randomness (init, data
// synthesis, schedule shuffling, mixup, stochastic depth) owns its own Rng
// derived from the run seed plus a stream tag, so adding a draw in one
// subsystem never shifts the values another subsystem sees.
//
// The generator is xoshiro256** seeded through SplitMix64. Distributions are
// implemented here rather than taken from <random> because libstdc++ does not
// pin their sequences across versions, and run reproducibility is a hard
// requirement: identical seeds must give byte-identical checkpoints.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace polyvit {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  // Stream derivation: hash the tag into the seed (FNV-1a), then scramble.
  // Same (seed, tag) always yields the same stream; distinct tags decorrelate.
  Rng(std::uint64_t seed, std::string_view tag) : Rng(derive_seed(seed, tag)) {}

  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    std::uint64_t sm = seed ^ h;
    return splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits, the full precision of a double.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n). Rejection keeps the distribution exact; the
  // loop body almost never repeats for small n.
  std::uint64_t bounded(std::uint64_t n) {
    const std::uint64_t limit = n == 0 ? 0 : ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r < limit) return r % n;
    }
  }

  // Box-Muller, cosine branch only. Exactly two uniforms per call, never a
  // cached spare, so the draw count per normal is fixed.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Marsaglia-Tsang squeeze for shape alpha >= 1; the alpha < 1 case lifts to
  // alpha + 1 and multiplies by u^(1/alpha). Unit scale: the only consumer is
  // the beta sampler, which is scale invariant.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      const double g = gamma(alpha + 1.0);
      const double u = uniform();
      return g * std::pow(1.0 - u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      const double x = normal();
      const double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      const double v = t * t * t;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  // Fisher-Yates, descending index, bounded() for the partner draw.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
};

}  // namespace polyvit
