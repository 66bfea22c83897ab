#pragma once

#include <cstdint>
#include <string_view>

// Deterministic, platform-independent randomness and hashing. Standard
// library distributions are implementation-defined, so everything that
// must reproduce byte-identically across runs goes through these.

namespace audit {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// FNV-1a over the raw bytes; stable across platforms unlike std::hash.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based generator: the i-th output of a given seed is a pure
// function of (seed, i), so streams can be replayed and forked freely.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64() { return splitmix64(seed_ ^ (counter_++ * 0x9e3779b97f4a7c15ULL)); }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n).
  std::size_t next_index(std::size_t n) {
    return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n);
  }

  Rng fork(std::uint64_t stream) const { return Rng(hash_combine(seed_, stream)); }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// Single stateless uniform draw in [0, 1) from a key tuple.
inline double keyed_unit_draw(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return static_cast<double>(hash_combine(hash_combine(a, b), c) >> 11) * 0x1.0p-53;
}

}  // namespace audit
