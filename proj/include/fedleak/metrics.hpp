#pragma once

#include <vector>

#include "fedleak/tensor.hpp"

namespace fedleak {

/// Peak PSNR returned for exactly-zero MSE (documented sentinel).
inline constexpr double kPsnrCap = 100.0;

/// 10 * log10(1 / MSE) for pixel domain [0,1] (MAX = 1); symmetric in its
/// arguments; returns kPsnrCap when MSE == 0.
double psnr(const Array& a, const Array& b);

struct EvalReport {
  std::vector<double> per_image_psnr;  // under the optimal matching
  std::vector<int> assignment;         // recon index chosen for each truth row
  double rec_percent = 0.0;            // fraction of PSNRs strictly above threshold
  double mean_psnr = 0.0;
  double label_err = -1.0;             // |est - truth|_1 / 2; -1 when not evaluated
};

/// Matches reconstructions to ground truth by maximizing total PSNR, then
/// scores each matched pair against the success threshold.
EvalReport evaluate(const std::vector<Array>& reconstructions,
                    const std::vector<Array>& truth, double threshold_db);

/// Number of mislabeled examples: |est - truth|_1 / 2.
double label_count_error(const std::vector<int>& est,
                         const std::vector<int>& truth);

}  // namespace fedleak
