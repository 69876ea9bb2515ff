#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hgl/errors.hpp"

namespace hgl {

// Deterministic RNG built on std::mt19937_64 (whose raw output is fully
// specified by the standard) with hand-rolled real-valued transforms, so the
// same seed gives the same stream on every platform. Standard-library
// distributions are deliberately avoided: their algorithms are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller, caching the second draw.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform_pos();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // Standard Gumbel(0, 1).
  double gumbel() { return -std::log(-std::log(uniform_pos())); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw ConfigError("Rng::uniform_int: n must be positive");
    std::uint64_t un = static_cast<std::uint64_t>(n);
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample k distinct values from [0, n) in selection order.
  std::vector<int> sample_without_replacement(int n, int k);

  // Derive an independent named stream from this one's base seed. Streams for
  // distinct names never share state with the parent or each other.
  Rng substream(const std::string& name) const {
    return Rng(mix(seed_, fnv1a(name)));
  }

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined value.
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

inline std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k < 0 || k > n) throw ConfigError("sample_without_replacement: k out of range");
  // Partial Fisher-Yates over an index array.
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    int j = i + uniform_int(n - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    out.push_back(idx[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace hgl
