#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedleak/fedavg.hpp"
#include "fedleak/label_recon.hpp"
#include "fedleak/model.hpp"
#include "fedleak/random.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input-reconstruction strategies:
///   OursPrior    - one variable tensor per (epoch, batch) slot plus the
///                  epoch order-invariant penalty
///   OursNoPrior  - per-(epoch, batch) variables, no penalty
///   Shared       - one variable tensor per batch, reused every epoch
///   FedsgdEpoch  - one full-set variable per epoch, single batch per epoch
///   Fedsgd       - one full-set variable, single gradient at theta_s
enum class AttackMode { OursPrior, OursNoPrior, Shared, FedsgdEpoch, Fedsgd };

enum class InvAggregate { Mean, Max, ConvMean, ConvMax };
enum class InvDistance { L1, L2 };
enum class ClipPenalty { Squared, Linear };
enum class InitDist { Uniform, Gaussian };

AttackMode parse_attack_mode(const std::string& name);
std::string attack_mode_name(AttackMode mode);
InvAggregate parse_aggregate(const std::string& name);
std::string aggregate_name(InvAggregate g);
InvDistance parse_inv_distance(const std::string& name);
std::string inv_distance_name(InvDistance d);

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AttackConfig {
  AttackMode mode = AttackMode::OursPrior;
  int steps = 200;
  double eta_rec = 0.4;
  double decay = 0.995;    // multiplicative lr decay factor
  int decay_every = 10;    // applied at exact step multiples
  double lambda_inv = 1000.0;
  double lambda_tv = 0.001;
  double lambda_clip = 2.0;
  InvAggregate aggregate = InvAggregate::Mean;
  InvDistance inv_distance = InvDistance::L2;
  ClipPenalty clip_penalty = ClipPenalty::Squared;
  InitDist init = InitDist::Uniform;
  AdamParams adam;
  uint64_t seed = 0;
  int conv_prior_channels = 96;
  int conv_prior_kernel = 3;

  void validate() const;
};

/// Expands label counts to a multiset, shuffles once, cuts into batches of
/// size m (last batch smaller when the total is not divisible). The split is
/// fixed for the whole reconstruction and reused every epoch.
std::vector<std::vector<int>> rand_order(const std::vector<int>& counts, int m,
                                         SeedStream s);

/// Reconstruction variables. Group layout by mode:
///   OursPrior/OursNoPrior: groups = epochs, one tensor per batch
///   Shared:                1 group, one tensor per batch
///   FedsgdEpoch:           groups = epochs, one full-set tensor each
///   Fedsgd:                1 group, one full-set tensor
struct AttackVariables {
  AttackMode mode = AttackMode::OursPrior;
  int epochs = 1;
  std::vector<std::vector<Array>> groups;

  size_t tensor_count() const;
};

AttackVariables rand_init(AttackMode mode, const std::vector<int>& batch_sizes,
                          int epochs, int channels, int h, int w,
                          InitDist dist, SeedStream s);

/// Frozen random convolution bank for the conv-based aggregates, drawn once
/// per attack run and shared by all epochs.
Array make_conv_prior_kernel(int out_channels, int in_channels, int kernel,
                             SeedStream s);

/// Differentiable replay of the client update under the mode's variable
/// wiring; returns the final simulated weights. Uses the same per-step
/// arithmetic as client_update, so a ground-truth wiring reproduces the real
/// theta_c bit-exactly.
std::vector<Tensor> sim_update(Graph& g, const Architecture& arch,
                               const std::vector<Tensor>& theta_s,
                               const std::vector<std::vector<Tensor>>& vars,
                               const std::vector<std::vector<int>>& label_split,
                               double eta, int epochs, AttackMode mode);

/// Number of simulated local steps for a mode (normalizes the simulated
/// averaged update; cosine similarity is scale-invariant, so this only
/// affects reported magnitudes).
int simulated_steps(AttackMode mode, int epochs, int batches);

/// Cosine distance 1 - cos(target, sim); defined as 1 when either vector has
/// zero norm.
Tensor loss_sim(Graph& g, Tensor target, Tensor sim);

/// Epoch order-invariant penalty over per-epoch image sets (each (N,C,H,W)):
/// mean (or max) over the sample axis, optionally after the frozen random
/// convolution, compared across every epoch pair; 0 for a single epoch.
Tensor loss_inv(Graph& g, const std::vector<Tensor>& epoch_sets,
                InvAggregate aggregate, InvDistance distance,
                Tensor conv_kernel = Tensor());

/// Anisotropic total variation (mean per image) and out-of-range penalty
/// (mean per pixel) over all variable tensors.
struct Regularizers {
  Tensor tv;
  Tensor clip;
};
Regularizers regularizers(Graph& g, const std::vector<Tensor>& vars,
                          ClipPenalty penalty);

struct LossTraceRow {
  int step = 0;
  double l_sim = 0.0;
  double l_inv = 0.0;
  double tv = 0.0;
  double clip = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct AttackResult {
  /// Flat per-epoch reconstructions in batch-major order (one group for the
  /// Shared/Fedsgd modes).
  std::vector<std::vector<Array>> epoch_recons;
  /// Matched-and-averaged final reconstructions.
  std::vector<Array> finals;
  std::vector<std::vector<int>> label_split;
  std::vector<int> label_counts_used;
  std::vector<LossTraceRow> trace;
};

/// Optional overrides for oracle experiments: a known label-to-batch split
/// and/or concrete starting variables instead of the seeded random ones.
struct AttackInit {
  std::vector<std::vector<int>> label_split;
  AttackVariables variables;
  bool has_variables = false;
};

/// Runs the full reconstruction: fixes the label split, initializes the
/// variables, minimizes l_sim + lambda_inv*l_inv + lambda_tv*tv +
/// lambda_clip*clip with Adam under exponential lr decay, then matches and
/// averages per-epoch reconstructions. Deterministic per config seed.
AttackResult attack(const ObservedUpdate& obs, const LabelCountEstimate& counts,
                    const AttackConfig& cfg, const AttackInit* init = nullptr);

}  // namespace fedleak
