#pragma once

// Shared plumbing for the faithkit library: error type, check helpers,
// a portable deterministic RNG, and stable hashing/formatting utilities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace faithkit {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void append_all(std::ostringstream&) {}

template <typename T, typename... Rest>
void append_all(std::ostringstream& os, const T& value, const Rest&... rest) {
  os << value;
  append_all(os, rest...);
}

}  // namespace detail

template <typename... Parts>
std::string concat(const Parts&... parts) {
  std::ostringstream os;
  detail::append_all(os, parts...);
  return os.str();
}

template <typename... Parts>
void require(bool condition, const Parts&... message) {
  if (!condition) {
    throw Error(concat(message...));
  }
}

// Fixed-point float rendering used by every report writer so that identical
// reports serialize to identical bytes.
inline std::string format_fixed(double value, int decimals = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << value;
  return os.str();
}

// -----------------------------------------------------------------------------
// Deterministic randomness
// -----------------------------------------------------------------------------
//
// SplitMix64 with an explicit Box-Muller normal. The standard-library
// distributions are implementation-defined, so parameter initialization goes
// through this generator to keep seeded runs reproducible across toolchains.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Rng::below requires n > 0");
    return next_u64() % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Sample k distinct indices from [0, n) in ascending order.
  std::vector<int> sample_without_replacement(int n, int k) {
    require(k >= 0 && k <= n, "sample size out of range");
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(below(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Key derivation for independent parameter streams: fold arbitrary integer
// tags into a seed without correlating the streams.
inline std::uint64_t mix_seed(std::uint64_t seed) { return seed; }

template <typename... Tags>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, Tags... rest) {
  std::uint64_t z = seed ^ (tag + 0x9E3779B97F4A7C15ULL + (seed << 6) + (seed >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return mix_seed(z, static_cast<std::uint64_t>(rest)...);
}

// FNV-1a, stable across runs and platforms (std::hash is not).
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string to_hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace faithkit
