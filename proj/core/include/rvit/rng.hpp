#pragma once

#include <cstdint>
#include <random>

namespace rvit {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a master seed and fixed tags, so
// shuffling, masking, attacks etc. stay reproducible regardless of call order.
inline uint64_t derive_seed(uint64_t master, uint64_t tag, uint64_t sub = 0) {
  return splitmix64(splitmix64(master ^ (tag * 0x9e3779b97f4a7c15ull)) ^ sub);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  float uniform(float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    return d(eng_);
  }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(eng_);
  }

  float normal(float mean, float stddev) {
    std::normal_distribution<float> d(mean, stddev);
    return d(eng_);
  }

  // Normal draw rejected outside two standard deviations.
  float trunc_normal(float stddev) {
    for (;;) {
      float v = normal(0.0f, stddev);
      if (v >= -2.0f * stddev && v <= 2.0f * stddev) return v;
    }
  }

  bool coin() { return uniform_int(0, 1) == 1; }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace rvit
