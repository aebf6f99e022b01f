// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace mmae {

// Counter-based generator built on the splitmix64 mixer: output i is a pure
// function of (key, i), so a stream can be reproduced from its key alone and
// sub-streams can be derived hierarchically (seed -> epoch -> step -> item)
// without carrying mutable state through the program. This is what makes
// checkpoint resume bit-exact.
class Rng {
 public:
  explicit Rng(std::uint64_t key = 0) : key_(key), counter_(0) {}

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Independent stream keyed by (this key, tags...). Derivation is order
  // sensitive: derive(a, b) != derive(b, a).
  Rng derive(std::uint64_t tag) const { return Rng(mix(key_ ^ mix(tag))); }
  Rng derive(std::uint64_t a, std::uint64_t b) const { return derive(a).derive(b); }
  Rng derive(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return derive(a).derive(b).derive(c);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Marsaglia polar method.
  double normal() {
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    return u * std::sqrt(-2.0 * std::log(s) / s);
  }

  // Normal truncated to [-bound, bound] standard deviations, by rejection.
  double truncated_normal(double stddev, double bound = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > bound);
    return z * stddev;
  }

  // Marsaglia-Tsang for alpha >= 1; boosted for alpha < 1.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      const double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(const std::vector<double>& alphas) {
    std::vector<double> g(alphas.size());
    double sum = 0.0;
    for (size_t i = 0; i < alphas.size(); ++i) {
      g[i] = gamma(alphas[i]);
      sum += g[i];
    }
    if (sum <= 0.0) sum = 1.0;
    for (double& x : g) x /= sum;
    return g;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_int(i)]);
    }
  }

  // Fisher-Yates permutation of [0, n).
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace mmae
