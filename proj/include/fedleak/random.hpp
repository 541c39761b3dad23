#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fedleak {

/// Deterministic seeded random stream with labeled substream derivation.
///
/// Derivation scheme: child state = mix64(state ^ fnv1a64(label)), where
/// mix64 is the splitmix64 finalizer. Sampling advances the state by the
/// splitmix64 golden-ratio increment and finalizes with mix64. Same
/// (seed, path) always yields the same stream; distinct labels yield
/// independent streams.
///
/// Variate algorithms (kept simple so ports can match distributions):
///   uniform  - 53-bit mantissa in [0, 1)
///   normal   - Box-Muller, two uniforms per variate, spare discarded
///   laplace  - inverse CDF, x = -b * sgn(u) * ln(1 - 2|u|), u in (-1/2, 1/2)
class SeedStream {
 public:
  explicit SeedStream(uint64_t root_seed) : state_(root_seed) {}

  /// Derive an independent substream for `label` without advancing this one.
  SeedStream child(std::string_view label) const;

  uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  double normal();                         // N(0, 1)
  double normal(double mean, double sigma);
  double laplace(double scale);            // Laplace(0, scale)
  uint64_t uniform_int(uint64_t n);        // {0, ..., n-1}, unbiased
  std::vector<int> permutation(int n);     // Fisher-Yates shuffle of 0..n-1

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

}  // namespace fedleak
