#pragma once

#include <vector>

#include "fedleak/tensor.hpp"

namespace fedleak {

struct Assignment {
  std::vector<int> perm;  // perm[i] = column assigned to row i
  double objective = 0.0;
};

/// Pairwise PSNR matrix M[i][j] = psnr(a[i], b[j]).
std::vector<std::vector<double>> similarity_matrix(const std::vector<Array>& a,
                                                   const std::vector<Array>& b);

/// Optimal square assignment (Hungarian-family, O(n^3)); ties break toward
/// the lexicographically smallest permutation. Throws on non-finite entries.
Assignment linear_sum_assignment(const std::vector<std::vector<double>>& m,
                                 bool maximize);

/// Reorders each epoch's reconstructions to best match epoch 1 by PSNR, then
/// averages position-wise across epochs. Input: [epoch][image], all epochs
/// holding the same image count in a common batch-major order.
std::vector<Array> match_epoch(const std::vector<std::vector<Array>>& per_epoch);

}  // namespace fedleak
