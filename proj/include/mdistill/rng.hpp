#pragma once

// Deterministic random number generation.
//
// Stream generator: xoshiro256** (Blackman & Vigna, 2018), state seeded by
// running SplitMix64 four times from the 64-bit seed. Derived quantities:
//   uniform()       : (next() >> 11) * 2^-53, in [0, 1)
//   uniform_index(n): Lemire's multiply-shift with rejection, unbiased in [0, n)
//   normal()        : Box-Muller on two uniforms, u1 mapped to (0, 1]; the
//                     second variate of each pair is cached and returned next.
// The integer stream is bit-identical on every platform; normal() depends on
// the platform's log/sqrt/cos/sin.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

namespace mdistill {

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Combine a base seed with a key (cloud index, vote pass, ...) into a new seed.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key) {
  std::uint64_t s = seed ^ (key * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL);
  std::uint64_t a = splitmix64(s);
  return a ^ splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t uniform_index(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    std::uint64_t x = next();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        x = next();
        m = static_cast<unsigned __int128>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal() noexcept {
    if (cached_normal_) {
      double v = *cached_normal_;
      cached_normal_.reset();
      return v;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = radius * std::sin(theta);
    return radius * std::cos(theta);
  }

  double normal(double mean, double sigma) noexcept { return mean + sigma * normal(); }

  /// A fresh generator whose seed is derived from this one's seed and `key`.
  Rng fork(std::uint64_t key) const { return Rng(derive_seed(seed_, key)); }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  std::optional<double> cached_normal_;
};

/// Fisher-Yates shuffle driven by Rng.
template <typename Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    using std::swap;
    swap(v[i - 1], v[j]);
  }
}

}  // namespace mdistill
