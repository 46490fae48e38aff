#pragma once

#include <cstdint>
#include <random>

namespace qseg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic random source. mt19937 and the draw helpers below are fully
// specified, so streams are identical across platforms and standard-library
// implementations (std::uniform_* distributions are not, which is why they
// are not used here).
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : seed_(seed),
        gen_(static_cast<std::uint32_t>(splitmix64(seed) & 0xffffffffu)) {}

  std::uint64_t seed() const { return seed_; }

  // Independent stream derived from this one's seed and a salt.
  Rng fork(std::uint64_t salt) const { return Rng(splitmix64(seed_ ^ (salt * 0x9e3779b97f4a7c15ULL + 1))); }

  std::uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased via rejection.
  std::uint32_t below(std::uint32_t n) {
    if (n <= 1) return 0;
    const std::uint32_t bound = (0xffffffffu / n) * n;
    std::uint32_t x = next_u32();
    while (x >= bound) x = next_u32();
    return x % n;
  }

  int range_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint32_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937 gen_;
};

}  // namespace qseg
