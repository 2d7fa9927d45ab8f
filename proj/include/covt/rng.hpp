#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace covt {

using Rng = std::mt19937_64;

// FNV-1a, used to derive stable per-record seeds from (global seed, id).
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline Rng derive_rng(std::uint64_t seed, const std::string& id) {
  return Rng(fnv1a(id, seed ^ 0x9e3779b97f4a7c15ull));
}

// Uniform helpers with pinned bit-to-value mappings. The standard
// distributions are implementation-defined, which would break the
// bitwise-determinism guarantees, so we roll our own.
inline double rnd_u01(Rng& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double rnd_uniform(Rng& g, double lo, double hi) {
  return lo + (hi - lo) * rnd_u01(g);
}

// Inclusive range.
inline int rnd_int(Rng& g, int lo, int hi) {
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(g() % span);
}

inline double rnd_normal(Rng& g) {
  // Box-Muller, always consumes exactly two draws.
  double u1 = rnd_u01(g);
  double u2 = rnd_u01(g);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace covt
