#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace jigmark {

/// Bad or missing configuration; maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Oracle transport failure (timeout, dead subprocess, HTTP error);
/// retriable; maps to CLI exit code 3.
struct OracleTransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Oracle returned a malformed or shape-mismatched response.
struct OracleProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Seedable random stream used everywhere randomness is needed.
/// All draws are defined on top of mt19937_64 so a (seed, call sequence)
/// pair fully pins the output.
class Rng {
public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    // rejection sampling to avoid modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  bool coin() { return (gen_() & 1u) != 0; }

  /// Standard normal via Box-Muller (no cached spare, keeps state simple).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derive an independent stream for a sub-task without disturbing this one.
  Rng fork(uint64_t salt) const {
    return Rng(splitmix(seed_mix_ ^ salt));
  }

  static uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  /// Remember the construction seed so fork() is a pure function of it.
  static Rng seeded(uint64_t seed) {
    Rng r(seed);
    r.seed_mix_ = splitmix(seed);
    return r;
  }

private:
  std::mt19937_64 gen_;
  uint64_t seed_mix_ = 0;
};

/// Deterministic per-(run, epoch, step, item, purpose) seed derivation.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0,
                            uint64_t c = 0, uint64_t d = 0) {
  uint64_t h = Rng::splitmix(base ^ 0x243f6a8885a308d3ULL);
  h = Rng::splitmix(h ^ a * 0x100000001b3ULL);
  h = Rng::splitmix(h ^ b * 0xc2b2ae3d27d4eb4fULL);
  h = Rng::splitmix(h ^ c * 0x165667b19e3779f9ULL);
  h = Rng::splitmix(h ^ d * 0x27d4eb2f165667c5ULL);
  return h;
}

inline uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::string base64_encode(const std::vector<uint8_t>& data);
std::vector<uint8_t> base64_decode(const std::string& text);

/// Percentile of a value list with linear interpolation between order
/// statistics (index = p/100 * (n-1)).
double percentile_interpolated(std::vector<double> values, double pct);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace jigmark
