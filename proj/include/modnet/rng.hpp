#pragma once

#include <cstdint>
#include <vector>

#include "modnet/tensor.hpp"

namespace modnet {

// splitmix64; used to derive independent per-item seeds from a root seed.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t root, uint64_t a, uint64_t b = 0) {
  return splitmix64(root ^ splitmix64(a ^ splitmix64(b)));
}

/// xoshiro256** -- small deterministic generator. The stdlib distributions are
/// implementation-defined, so all draws below are hand-rolled for stable
/// streams across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 1) { reseed(seed); }

  void reseed(uint64_t seed) {
    for (auto& w : s_) {
      seed = splitmix64(seed);
      w = seed;
    }
  }

  uint64_t next() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0,1).
  Scalar uniform() { return static_cast<Scalar>(next() >> 11) * 0x1.0p-53; }

  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next() % n; }

  /// Index drawn from an (unnormalized, nonnegative) weight vector.
  int categorical(const std::vector<Scalar>& w) {
    Scalar total = 0;
    for (Scalar x : w) total += x;
    Scalar u = uniform() * total;
    Scalar acc = 0;
    for (size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
  }

  /// In-place Fisher-Yates; stable across platforms unlike std::shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t s_[4];
};

}  // namespace modnet
