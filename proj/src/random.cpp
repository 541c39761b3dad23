#include "fedleak/random.hpp"

#include <cmath>
#include <numbers>

namespace fedleak {

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer
uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

SeedStream SeedStream::child(std::string_view label) const {
  return SeedStream(mix64(state_ ^ fnv1a64(label)));
}

uint64_t SeedStream::next_u64() {
  state_ += kGolden;
  return mix64(state_);
}

double SeedStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeedStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double SeedStream::normal() {
  // Box-Muller; u1 shifted into (0, 1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double SeedStream::normal(double mean, double sigma) {
  return mean + sigma * normal();
}

double SeedStream::laplace(double scale) {
  double u = uniform() - 0.5;
  while (u == -0.5) u = uniform() - 0.5;
  double sgn = u < 0.0 ? -1.0 : 1.0;
  return -scale * sgn * std::log(1.0 - 2.0 * std::abs(u));
}

uint64_t SeedStream::uniform_int(uint64_t n) {
  if (n <= 1) return 0;
  // rejection sampling over the largest multiple of n
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

std::vector<int> SeedStream::permutation(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(uniform_int(static_cast<uint64_t>(i) + 1));
    std::swap(p[i], p[j]);
  }
  return p;
}

}  // namespace fedleak
