#include "fedleak/fedavg.hpp"

#include <stdexcept>
#include <string>

namespace fedleak {

void ClientDataset::validate() const {
  if (inputs.shape.size() != 4)
    throw std::invalid_argument("dataset: inputs must be (N,C,H,W), got " +
                                shape_str(inputs.shape));
  if (size() < 1) throw std::invalid_argument("dataset: empty");
  if (static_cast<int>(labels.size()) != size())
    throw std::invalid_argument("dataset: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(size()) +
                                " inputs");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("dataset: label " + std::to_string(y) +
                                  " out of range [0," +
                                  std::to_string(num_classes) + ")");
}

Array ClientDataset::gather(const std::vector<int>& idx) const {
  const int64_t row = numel(inputs.shape) / inputs.shape[0];
  Shape s = inputs.shape;
  s[0] = static_cast<int>(idx.size());
  Array out(s);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(inputs.data.begin() + idx[i] * row, row,
                out.data.begin() + static_cast<int64_t>(i) * row);
  return out;
}

std::vector<int> ClientDataset::gather_labels(const std::vector<int>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i)
    out[i] = labels[static_cast<size_t>(idx[i])];
  return out;
}

std::vector<int> ClientDataset::label_counts() const {
  std::vector<int> counts(static_cast<size_t>(num_classes), 0);
  for (int y : labels) counts[static_cast<size_t>(y)]++;
  return counts;
}

std::vector<std::vector<int>> partition_data(int n, int m, SeedStream stream) {
  if (n < 1 || m < 1)
    throw std::invalid_argument("partition_data: n and m must be positive");
  std::vector<int> perm = stream.permutation(n);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += m) {
    const int end = std::min(start + m, n);
    batches.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return batches;
}

std::vector<std::vector<int>> epoch_partition(const FedAvgConfig& cfg, int n,
                                              int epoch) {
  const int effective = cfg.consistent_batches ? 1 : epoch;
  SeedStream s = SeedStream(cfg.partition_seed)
                     .child("partition/epoch=" + std::to_string(effective));
  return partition_data(n, cfg.batch_size, s);
}

std::vector<Tensor> sgd_step(Graph& g, const Architecture& arch,
                             const std::vector<Tensor>& theta, Tensor batch,
                             const std::vector<int>& labels, double eta) {
  GraphParams gp;
  gp.tensors = theta;
  ForwardTrace trace = forward(g, arch, gp, batch, labels);
  GradientMap gm = g.grad(trace.loss, theta);
  std::vector<Tensor> next;
  next.reserve(theta.size());
  for (size_t i = 0; i < theta.size(); ++i)
    next.push_back(g.sub(theta[i], g.mul_scalar(gm[i], eta)));
  return next;
}

ClientUpdateResult client_update(const ClientDataset& data,
                                 const Architecture& arch,
                                 const Parameters& theta_s,
                                 const FedAvgConfig& cfg, bool record_trace) {
  data.validate();
  arch.validate();
  if (cfg.batch_size < 1 || cfg.epochs < 1)
    throw std::invalid_argument("client_update: batch size and epochs must be positive");

  ClientUpdateResult result;
  Parameters theta = theta_s;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto batches = epoch_partition(cfg, data.size(), epoch);
    for (const auto& idx : batches) {
      // A fresh graph per step keeps memory flat; the updated weights are
      // detached and re-inserted as leaves for the next step.
      Graph g;
      std::vector<Tensor> leaves;
      leaves.reserve(theta.tensors.size());
      for (const Array& t : theta.tensors) leaves.push_back(g.leaf(t));
      Tensor batch = g.leaf(data.gather(idx));
      auto next = sgd_step(g, arch, leaves, batch, data.gather_labels(idx),
                           cfg.eta);
      for (size_t i = 0; i < next.size(); ++i)
        theta.tensors[i] = next[i].to_array();
      ++result.steps;
      if (record_trace) result.step_trace.push_back(theta);
    }
  }
  result.theta_c = std::move(theta);
  return result;
}

std::vector<int> ObservedUpdate::step_batch_sizes() const {
  std::vector<int> sizes;
  int left = n_examples;
  while (left > 0) {
    sizes.push_back(std::min(batch_size, left));
    left -= batch_size;
  }
  return sizes;
}

Array averaged_update(const ObservedUpdate& obs) {
  if (obs.eta == 0.0)
    throw std::invalid_argument("averaged_update: eta must be nonzero");
  Array s = obs.theta_s.flatten();
  Array c = obs.theta_c.flatten();
  if (s.size() != c.size())
    throw std::invalid_argument("averaged_update: parameter size mismatch");
  const double scale = 1.0 / (obs.eta * obs.local_steps());
  Array out(s.shape);
  for (size_t i = 0; i < s.data.size(); ++i)
    out.data[i] = (s.data[i] - c.data[i]) * scale;
  return out;
}

}  // namespace fedleak
