#pragma once

#include <cstdint>
#include <vector>

#include "fedleak/model.hpp"
#include "fedleak/random.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

/// Private client data: inputs (N, C, H, W) with values in [0,1] and one
/// class id per example.
struct ClientDataset {
  Array inputs;
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
  void validate() const;
  /// Rows `idx` of the dataset as a batch array plus gathered labels.
  Array gather(const std::vector<int>& idx) const;
  std::vector<int> gather_labels(const std::vector<int>& idx) const;
  std::vector<int> label_counts() const;
};

struct FedAvgConfig {
  double eta = 0.01;
  int batch_size = 1;
  int epochs = 1;
  uint64_t partition_seed = 0;
  bool consistent_batches = false;  // reuse the epoch-1 split for all epochs
};

/// A uniformly random permutation of 0..n-1 cut into ceil(n/m) consecutive
/// chunks of size m (last chunk n mod m when nonzero).
std::vector<std::vector<int>> partition_data(int n, int m, SeedStream stream);

/// The split used at a given 1-based epoch of a client run (derived from the
/// partition seed; epoch 1's split when consistent batches are requested).
std::vector<std::vector<int>> epoch_partition(const FedAvgConfig& cfg, int n,
                                              int epoch);

/// One SGD step on the graph: theta <- theta - eta * dCE(batch)/dtheta.
/// Shared by the real client update and the attack's simulated replay so the
/// two produce bit-identical arithmetic.
std::vector<Tensor> sgd_step(Graph& g, const Architecture& arch,
                             const std::vector<Tensor>& theta, Tensor batch,
                             const std::vector<int>& labels, double eta);

struct ClientUpdateResult {
  Parameters theta_c;
  int steps = 0;
  /// Intermediate parameters after each step, when recording was requested.
  std::vector<Parameters> step_trace;
};

ClientUpdateResult client_update(const ClientDataset& data,
                                 const Architecture& arch,
                                 const Parameters& theta_s,
                                 const FedAvgConfig& cfg,
                                 bool record_trace = false);

/// The server's view of one round: initial and returned weights plus the
/// training configuration the protocol reveals.
struct ObservedUpdate {
  Architecture arch;
  Parameters theta_s;
  Parameters theta_c;
  double eta = 0.0;
  int batch_size = 1;
  int epochs = 1;
  int n_examples = 0;

  int batches_per_epoch() const {
    return (n_examples + batch_size - 1) / batch_size;
  }
  int local_steps() const { return epochs * batches_per_epoch(); }
  /// Sizes of the batches within one epoch (m, ..., m, remainder).
  std::vector<int> step_batch_sizes() const;
};

/// Normalized averaged update (theta_s - theta_c) / (eta * U), flattened.
Array averaged_update(const ObservedUpdate& obs);

}  // namespace fedleak
