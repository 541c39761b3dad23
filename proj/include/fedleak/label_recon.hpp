#pragma once

#include <string>
#include <vector>

#include "fedleak/fedavg.hpp"
#include "fedleak/model.hpp"
#include "fedleak/random.hpp"

namespace fedleak {

/// Mean network statistics over a probe set at fixed weights: per-class mean
/// softmax probability and mean sum of penultimate activations.
struct NetworkStats {
  std::vector<double> p_mean;
  double o_mean = 0.0;
  std::string at;  // "theta_s" or "theta_c"
};

struct LabelCountEstimate {
  std::vector<double> raw;  // pre-integerization, may be negative
  std::vector<int> counts;  // nonnegative, sums to total
  int total = 0;
};

enum class StatsAt { ThetaS, ThetaC };
enum class InterpDirection {
  AsWritten,  // step i weights the theta_s statistics by i/U
  Reversed,   // step i weights the theta_c statistics by i/U
};

/// Random probe inputs, iid uniform in [0,1] per pixel.
Array make_dummy_inputs(int count, int channels, int h, int w, SeedStream s);

NetworkStats estimate_stats(const Architecture& arch, const Parameters& theta,
                            const Array& dummy_inputs, const std::string& at);

/// Per-class sums of the final linear layer's weight block of a flattened
/// update vector (column sums feeding each logit).
std::vector<double> final_layer_column_sums(const Architecture& arch,
                                            const Array& flat_update);

/// Single-gradient label count estimate:
/// raw_k = n * p_mean_k - n * delta_k / o_mean. Errors when |o_mean| is
/// below `o_tolerance` (degenerate activations).
std::vector<double> fedsgd_label_counts(const std::vector<double>& delta_wfc,
                                        const NetworkStats& stats, int n,
                                        double o_tolerance = 1e-12);

/// Single-endpoint estimate on the averaged update with n = N^c.
LabelCountEstimate geng_baseline(const ObservedUpdate& obs, const Array& dummy,
                                 StatsAt at);

/// Interpolated per-step estimate: statistics at theta_s and theta_c are
/// linearly blended for each of the U local steps, the single-gradient
/// formula is applied per step with that step's batch size, and the results
/// are summed and divided by the epoch count.
LabelCountEstimate fedavg_label_counts(
    const ObservedUpdate& obs, const Array& dummy,
    InterpDirection dir = InterpDirection::AsWritten);

/// Nonnegative integers summing to n: clamp negatives, floor, then hand the
/// remaining deficit one-by-one to classes by largest fractional remainder
/// (ties to the lower class id); if the clamped floors already exceed n,
/// decrement the smallest positive counts (ties to the lower class id).
std::vector<int> integerize(const std::vector<double>& raw, int n);

}  // namespace fedleak
