#include "fedleak/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "fedleak/matching.hpp"

namespace fedleak {

double psnr(const Array& a, const Array& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("psnr: shapes " + shape_str(a.shape) + " and " +
                                shape_str(b.shape) + " differ");
  if (a.data.empty()) throw std::invalid_argument("psnr: empty images");
  double mse = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return 10.0 * std::log10(1.0 / mse);
}

EvalReport evaluate(const std::vector<Array>& reconstructions,
                    const std::vector<Array>& truth, double threshold_db) {
  if (reconstructions.size() != truth.size())
    throw std::invalid_argument("evaluate: image counts differ");
  EvalReport report;
  if (truth.empty()) return report;

  auto m = similarity_matrix(truth, reconstructions);
  Assignment a = linear_sum_assignment(m, /*maximize=*/true);
  report.assignment = a.perm;
  report.per_image_psnr.resize(truth.size());
  int successes = 0;
  double total = 0.0;
  for (size_t i = 0; i < truth.size(); ++i) {
    const double p = m[i][static_cast<size_t>(a.perm[i])];
    report.per_image_psnr[i] = p;
    total += p;
    if (p > threshold_db) ++successes;
  }
  report.mean_psnr = total / static_cast<double>(truth.size());
  report.rec_percent =
      100.0 * static_cast<double>(successes) / static_cast<double>(truth.size());
  return report;
}

double label_count_error(const std::vector<int>& est,
                         const std::vector<int>& truth) {
  if (est.size() != truth.size())
    throw std::invalid_argument("label_count_error: class counts differ");
  double l1 = 0.0;
  for (size_t i = 0; i < est.size(); ++i) l1 += std::abs(est[i] - truth[i]);
  return l1 / 2.0;
}

}  // namespace fedleak
