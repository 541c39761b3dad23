#pragma once

#include <cstdint>
#include <string>

#include "fedleak/tensor.hpp"

namespace fedleak {

enum class DefenseKind { None, Gaussian, Laplacian, Pruning };

/// Perturbation applied once to the communicated weight delta
/// (theta_s - theta_c) before the server sees it.
struct DefenseConfig {
  DefenseKind kind = DefenseKind::None;
  double strength = 0.0;  // sigma for noise kinds, drop probability for pruning
  uint64_t seed = 0;

  void validate() const;
};

DefenseKind parse_defense_kind(const std::string& name);
std::string defense_kind_name(DefenseKind kind);

/// gaussian: adds iid N(0, strength^2); laplacian: adds iid Laplace(0, strength);
/// pruning: zeroes each entry independently with probability `strength`.
/// Deterministic per seed. Surviving pruned entries are preserved bit-exactly.
Array apply_defense(const Array& update, const DefenseConfig& cfg);

}  // namespace fedleak
