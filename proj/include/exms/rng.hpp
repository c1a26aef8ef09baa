#pragma once

#include <cstdint>

namespace exms {

// 64-bit finalizer from SplitMix64 (Steele, Lea, Flood 2014). Bijective.
constexpr uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Independent stream for record/shard `index` under one master seed.
constexpr uint64_t derive_seed(uint64_t master, uint64_t index) {
  return mix64(master ^ mix64(index + 0x632be59bd9b4e019ull));
}

// Counter-based deterministic generator:
//   output(i) = mix64(seed + i * 0x9e3779b97f4a7c15)
// for i = 1, 2, 3, ...  The stream is a pure function of (seed, counter), so
// results are reproducible bit-for-bit across runs and platforms. Floating
// point derivations below use only IEEE-754 arithmetic plus libm log/cos/sin
// (normals), which is stable on a given platform.
class CounterRng {
 public:
  explicit CounterRng(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64() {
    counter_ += 0x9e3779b97f4a7c15ull;
    return mix64(seed_ + counter_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller on two uniforms; second value cached.
  double next_normal();

  // Unbiased uniform integer in [0, n), n >= 1. Lemire multiply-shift with rejection.
  uint64_t next_below(uint64_t n);

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace exms
