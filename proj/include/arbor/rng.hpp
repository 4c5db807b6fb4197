#ifndef ARBOR_RNG_HPP_
#define ARBOR_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string_view>
#include <vector>

namespace arbor {

// Deterministic counter-free PRNG built on splitmix64. Every random decision
// in the pipeline is derived from (seed, purpose tags...) so that training can
// resume bit-exactly from a step index alone and so that results do not depend
// on the C++ standard library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Unbiased integer in [0, n) via Lemire's method.
  uint64_t bounded(uint64_t n) {
    if (n == 0) return 0;
    while (true) {
      uint64_t x = next_u64();
      __uint128_t m = static_cast<__uint128_t>(x) * n;
      uint64_t lo = static_cast<uint64_t>(m);
      if (lo >= n) return static_cast<uint64_t>(m >> 64);
      uint64_t t = (-n) % n;
      if (lo >= t) return static_cast<uint64_t>(m >> 64);
    }
  }

  // Uniform in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, the sibling draw is discarded.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Zero-mean Gaussian with std `sigma`, rejection-sampled into [-bound, bound].
  double truncated_gaussian(double sigma, double bound) {
    while (true) {
      double x = gaussian() * sigma;
      if (x >= -bound && x <= bound) return x;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates over [0, n).
  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(bounded(static_cast<uint64_t>(i + 1)));
      std::swap(p[i], p[j]);
    }
    return p;
  }

  // k distinct indices drawn from [0, n), in draw order.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    std::vector<int64_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<int64_t> out;
    out.reserve(k);
    for (int64_t i = 0; i < k && i < n; ++i) {
      int64_t j = i + static_cast<int64_t>(bounded(static_cast<uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  // A child stream keyed by tags; streams with different tags are independent.
  Rng derive(std::initializer_list<uint64_t> tags) const {
    uint64_t h = state_;
    for (uint64_t t : tags) h = mix(h ^ mix(t));
    return Rng(h);
  }
  Rng derive(uint64_t a) const { return derive({a}); }
  Rng derive(uint64_t a, uint64_t b) const { return derive({a, b}); }
  Rng derive(uint64_t a, uint64_t b, uint64_t c) const { return derive({a, b, c}); }

  // Stable tag from a short label, for readable derivation sites.
  static constexpr uint64_t tag(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
    return h;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
};

}  // namespace arbor

#endif  // ARBOR_RNG_HPP_
