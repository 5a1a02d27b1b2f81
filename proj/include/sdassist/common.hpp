#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sdassist {

// Error hierarchy. Every module throws one of these; the CLI maps them to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidArgument : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ModelLoadError : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  using Error::Error;
};

using Rng = std::mt19937_64;

// Counter-based seed split (splitmix64 finalizer). Used to derive independent
// streams for cells, trials and frames from one master seed.
inline std::uint64_t split_seed(std::uint64_t master, std::uint64_t counter) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (counter + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo, double hi) {
  // 53-bit mantissa draw; independent of the standard library's distribution implementation.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

inline double gaussian(Rng& rng) {
  // Box-Muller; one draw per call keeps streams easy to reason about.
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline double sign_of(double x) { return (x > 0.0) - (x < 0.0); }

}  // namespace sdassist
