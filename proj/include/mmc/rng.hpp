#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace mmc {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic generator with portable derived helpers. The raw stream is
// xoshiro256**; all distributions are implemented here rather than through
// <random> adaptors so that sequences are bit-identical across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
  }

  std::uint64_t next() {
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

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return static_cast<int>(v % un);
  }

  // Standard normal via Box-Muller; one spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Fisher-Yates; std::shuffle is implementation-defined and not portable.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  // Sample k distinct indices from [0, n) in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    shuffle(pool);
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Independent stream keyed by (seed, tags...). Used so per-sample work is
// schedule-independent: the stream depends only on the key, not on how many
// draws other samples consumed.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = seed;
  std::uint64_t acc = splitmix64(s);
  for (std::uint64_t tag : tags) {
    s ^= tag + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
    acc ^= splitmix64(s);
  }
  return Rng(acc);
}

}  // namespace mmc
