#include "fedleak/label_recon.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedleak {

Array make_dummy_inputs(int count, int channels, int h, int w, SeedStream s) {
  if (count < 1) throw std::invalid_argument("make_dummy_inputs: empty probe set");
  Array out({count, channels, h, w});
  for (double& v : out.data) v = s.uniform();
  return out;
}

NetworkStats estimate_stats(const Architecture& arch, const Parameters& theta,
                            const Array& dummy_inputs, const std::string& at) {
  if (dummy_inputs.shape.size() != 4 || dummy_inputs.shape[0] < 1)
    throw std::invalid_argument("estimate_stats: probe set must be (N,C,H,W)");
  Graph g;
  GraphParams gp = insert_params(g, theta);
  ForwardTrace trace = forward(g, arch, gp, g.leaf(dummy_inputs), {});
  const int n = dummy_inputs.shape[0];
  const int k = arch.num_classes;

  NetworkStats stats;
  stats.at = at;
  stats.p_mean.assign(static_cast<size_t>(k), 0.0);
  const auto& probs = trace.probs.data();
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c)
      stats.p_mean[static_cast<size_t>(c)] += probs[static_cast<size_t>(i) * k + c];
  for (double& v : stats.p_mean) v /= n;

  const auto& penult = trace.penultimate.data();
  const int64_t width = static_cast<int64_t>(penult.size()) / n;
  double acc = 0.0;
  for (int64_t i = 0; i < static_cast<int64_t>(penult.size()); ++i)
    acc += penult[static_cast<size_t>(i)];
  stats.o_mean = acc / n;
  (void)width;
  return stats;
}

std::vector<double> final_layer_column_sums(const Architecture& arch,
                                            const Array& flat_update) {
  auto shapes = arch.param_shapes();
  if (shapes.size() < 2)
    throw std::invalid_argument("final_layer_column_sums: no parameters");
  const Shape& ws = shapes[shapes.size() - 2];  // final linear weight (in, K)
  int64_t offset = 0;
  for (size_t i = 0; i + 2 < shapes.size(); ++i) offset += numel(shapes[i]);
  const int in = ws[0], k = ws[1];
  if (offset + numel(ws) > flat_update.size())
    throw std::invalid_argument("final_layer_column_sums: update vector too short");
  std::vector<double> sums(static_cast<size_t>(k), 0.0);
  for (int r = 0; r < in; ++r)
    for (int c = 0; c < k; ++c)
      sums[static_cast<size_t>(c)] +=
          flat_update.data[static_cast<size_t>(offset + static_cast<int64_t>(r) * k + c)];
  return sums;
}

std::vector<double> fedsgd_label_counts(const std::vector<double>& delta_wfc,
                                        const NetworkStats& stats, int n,
                                        double o_tolerance) {
  if (delta_wfc.size() != stats.p_mean.size())
    throw std::invalid_argument("fedsgd_label_counts: class count mismatch");
  if (std::abs(stats.o_mean) < o_tolerance)
    throw std::runtime_error(
        "fedsgd_label_counts: penultimate activation sum is degenerate (|O| = " +
        std::to_string(std::abs(stats.o_mean)) + ")");
  std::vector<double> raw(delta_wfc.size());
  for (size_t k = 0; k < raw.size(); ++k)
    raw[k] = n * stats.p_mean[k] - n * delta_wfc[k] / stats.o_mean;
  return raw;
}

std::vector<int> integerize(const std::vector<double>& raw, int n) {
  if (n < 0) throw std::invalid_argument("integerize: negative total");
  const size_t k = raw.size();
  std::vector<int> counts(k, 0);
  std::vector<double> rem(k, 0.0);
  int64_t total = 0;
  for (size_t i = 0; i < k; ++i) {
    const double c = std::max(raw[i], 0.0);
    const double f = std::floor(c);
    counts[i] = static_cast<int>(f);
    rem[i] = c - f;
    total += counts[i];
  }
  if (total < n) {
    std::vector<size_t> order(k);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (rem[a] != rem[b]) return rem[a] > rem[b];
      return a < b;
    });
    int64_t deficit = n - total;
    for (int64_t t = 0; t < deficit; ++t)
      counts[order[static_cast<size_t>(t) % k]] += 1;
  } else if (total > n) {
    while (total > n) {
      size_t best = k;
      for (size_t i = 0; i < k; ++i)
        if (counts[i] > 0 && (best == k || counts[i] < counts[best])) best = i;
      counts[best] -= 1;
      --total;
    }
  }
  return counts;
}

namespace {

LabelCountEstimate finish(std::vector<double> raw, int n) {
  LabelCountEstimate est;
  est.counts = integerize(raw, n);
  est.raw = std::move(raw);
  est.total = n;
  return est;
}

}  // namespace

LabelCountEstimate geng_baseline(const ObservedUpdate& obs, const Array& dummy,
                                 StatsAt at) {
  NetworkStats stats =
      at == StatsAt::ThetaS
          ? estimate_stats(obs.arch, obs.theta_s, dummy, "theta_s")
          : estimate_stats(obs.arch, obs.theta_c, dummy, "theta_c");
  auto delta = final_layer_column_sums(obs.arch, averaged_update(obs));
  return finish(fedsgd_label_counts(delta, stats, obs.n_examples),
                obs.n_examples);
}

LabelCountEstimate fedavg_label_counts(const ObservedUpdate& obs,
                                       const Array& dummy,
                                       InterpDirection dir) {
  NetworkStats at_s = estimate_stats(obs.arch, obs.theta_s, dummy, "theta_s");
  NetworkStats at_c = estimate_stats(obs.arch, obs.theta_c, dummy, "theta_c");
  auto delta = final_layer_column_sums(obs.arch, averaged_update(obs));

  const int u = obs.local_steps();
  const int k = obs.arch.num_classes;
  const auto sizes = obs.step_batch_sizes();  // one epoch's batch sizes
  std::vector<double> acc(static_cast<size_t>(k), 0.0);
  for (int i = 1; i <= u; ++i) {
    const double ws = static_cast<double>(i) / u;  // weight on theta_s stats
    const double w = dir == InterpDirection::AsWritten ? ws : 1.0 - ws;
    NetworkStats step;
    step.p_mean.resize(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c)
      step.p_mean[static_cast<size_t>(c)] =
          w * at_s.p_mean[static_cast<size_t>(c)] +
          (1.0 - w) * at_c.p_mean[static_cast<size_t>(c)];
    step.o_mean = w * at_s.o_mean + (1.0 - w) * at_c.o_mean;
    const int n_i = sizes[static_cast<size_t>((i - 1) % static_cast<int>(sizes.size()))];
    auto raw_i = fedsgd_label_counts(delta, step, n_i);
    for (int c = 0; c < k; ++c) acc[static_cast<size_t>(c)] += raw_i[static_cast<size_t>(c)];
  }
  for (double& v : acc) v /= obs.epochs;
  return finish(std::move(acc), obs.n_examples);
}

}  // namespace fedleak
