#include "fedleak/attack.hpp"

#include <algorithm>
#include <cmath>

#include "fedleak/matching.hpp"

namespace fedleak {

AttackMode parse_attack_mode(const std::string& name) {
  if (name == "ours_prior") return AttackMode::OursPrior;
  if (name == "ours_no_prior") return AttackMode::OursNoPrior;
  if (name == "shared") return AttackMode::Shared;
  if (name == "fedsgd_epoch") return AttackMode::FedsgdEpoch;
  if (name == "fedsgd") return AttackMode::Fedsgd;
  throw std::invalid_argument("attack: unknown mode '" + name + "'");
}

std::string attack_mode_name(AttackMode mode) {
  switch (mode) {
    case AttackMode::OursPrior: return "ours_prior";
    case AttackMode::OursNoPrior: return "ours_no_prior";
    case AttackMode::Shared: return "shared";
    case AttackMode::FedsgdEpoch: return "fedsgd_epoch";
    case AttackMode::Fedsgd: return "fedsgd";
  }
  return "ours_prior";
}

InvAggregate parse_aggregate(const std::string& name) {
  if (name == "mean") return InvAggregate::Mean;
  if (name == "max") return InvAggregate::Max;
  if (name == "conv_mean") return InvAggregate::ConvMean;
  if (name == "conv_max") return InvAggregate::ConvMax;
  throw std::invalid_argument("attack: unknown aggregate '" + name + "'");
}

std::string aggregate_name(InvAggregate g) {
  switch (g) {
    case InvAggregate::Mean: return "mean";
    case InvAggregate::Max: return "max";
    case InvAggregate::ConvMean: return "conv_mean";
    case InvAggregate::ConvMax: return "conv_max";
  }
  return "mean";
}

InvDistance parse_inv_distance(const std::string& name) {
  if (name == "l1") return InvDistance::L1;
  if (name == "l2") return InvDistance::L2;
  throw std::invalid_argument("attack: unknown distance '" + name + "'");
}

std::string inv_distance_name(InvDistance d) {
  return d == InvDistance::L1 ? "l1" : "l2";
}

void AttackConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
  if (lambda_inv < 0 || lambda_tv < 0 || lambda_clip < 0)
    throw std::invalid_argument("attack: loss weights must be >= 0");
  if (eta_rec <= 0) throw std::invalid_argument("attack: eta_rec must be > 0");
  if (decay <= 0 || decay_every < 1)
    throw std::invalid_argument("attack: bad lr decay settings");
  if (conv_prior_channels < 1 || conv_prior_kernel < 1)
    throw std::invalid_argument("attack: bad conv prior settings");
}

std::vector<std::vector<int>> rand_order(const std::vector<int>& counts, int m,
                                         SeedStream s) {
  if (m < 1) throw std::invalid_argument("rand_order: batch size must be >= 1");
  std::vector<int> labels;
  for (size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] < 0)
      throw std::invalid_argument("rand_order: negative count");
    labels.insert(labels.end(), static_cast<size_t>(counts[k]),
                  static_cast<int>(k));
  }
  const int n = static_cast<int>(labels.size());
  if (n < 1) throw std::invalid_argument("rand_order: empty label multiset");
  std::vector<int> perm = s.permutation(n);
  std::vector<std::vector<int>> split;
  for (int start = 0; start < n; start += m) {
    const int end = std::min(start + m, n);
    std::vector<int> batch;
    batch.reserve(static_cast<size_t>(end - start));
    for (int i = start; i < end; ++i)
      batch.push_back(labels[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    split.push_back(std::move(batch));
  }
  return split;
}

size_t AttackVariables::tensor_count() const {
  size_t n = 0;
  for (const auto& g : groups) n += g.size();
  return n;
}

AttackVariables rand_init(AttackMode mode, const std::vector<int>& batch_sizes,
                          int epochs, int channels, int h, int w,
                          InitDist dist, SeedStream s) {
  if (epochs < 1) throw std::invalid_argument("rand_init: epochs must be >= 1");
  if (batch_sizes.empty())
    throw std::invalid_argument("rand_init: no batches");
  int total = 0;
  for (int b : batch_sizes) total += b;

  auto fill = [&](Array& a, SeedStream stream) {
    if (dist == InitDist::Uniform) {
      for (double& v : a.data) v = stream.uniform();
    } else {
      for (double& v : a.data)
        v = std::clamp(stream.normal(0.5, 0.1), 0.0, 1.0);
    }
  };

  AttackVariables vars;
  vars.mode = mode;
  vars.epochs = epochs;
  const int groups =
      (mode == AttackMode::OursPrior || mode == AttackMode::OursNoPrior ||
       mode == AttackMode::FedsgdEpoch)
          ? epochs
          : 1;
  const bool per_batch =
      mode == AttackMode::OursPrior || mode == AttackMode::OursNoPrior ||
      mode == AttackMode::Shared;
  for (int e = 0; e < groups; ++e) {
    std::vector<Array> group;
    if (per_batch) {
      for (size_t b = 0; b < batch_sizes.size(); ++b) {
        Array a({batch_sizes[b], channels, h, w});
        fill(a, s.child("init/epoch=" + std::to_string(e) +
                        "/batch=" + std::to_string(b)));
        group.push_back(std::move(a));
      }
    } else {
      Array a({total, channels, h, w});
      fill(a, s.child("init/epoch=" + std::to_string(e) + "/batch=0"));
      group.push_back(std::move(a));
    }
    vars.groups.push_back(std::move(group));
  }
  return vars;
}

Array make_conv_prior_kernel(int out_channels, int in_channels, int kernel,
                             SeedStream s) {
  Array k({out_channels, in_channels, kernel, kernel});
  const double bound =
      1.0 / std::sqrt(static_cast<double>(in_channels) * kernel * kernel);
  SeedStream stream = s.child("conv_prior");
  for (double& v : k.data) v = stream.uniform(-bound, bound);
  return k;
}

int simulated_steps(AttackMode mode, int epochs, int batches) {
  switch (mode) {
    case AttackMode::OursPrior:
    case AttackMode::OursNoPrior:
    case AttackMode::Shared:
      return epochs * batches;
    case AttackMode::FedsgdEpoch:
      return epochs;
    case AttackMode::Fedsgd:
      return 1;
  }
  return 1;
}

std::vector<Tensor> sim_update(Graph& g, const Architecture& arch,
                               const std::vector<Tensor>& theta_s,
                               const std::vector<std::vector<Tensor>>& vars,
                               const std::vector<std::vector<int>>& label_split,
                               double eta, int epochs, AttackMode mode) {
  std::vector<int> all_labels;
  for (const auto& batch : label_split)
    all_labels.insert(all_labels.end(), batch.begin(), batch.end());

  std::vector<Tensor> theta = theta_s;
  switch (mode) {
    case AttackMode::OursPrior:
    case AttackMode::OursNoPrior:
      for (int e = 0; e < epochs; ++e)
        for (size_t b = 0; b < label_split.size(); ++b)
          theta = sgd_step(g, arch, theta, vars[static_cast<size_t>(e)][b],
                           label_split[b], eta);
      break;
    case AttackMode::Shared:
      for (int e = 0; e < epochs; ++e)
        for (size_t b = 0; b < label_split.size(); ++b)
          theta = sgd_step(g, arch, theta, vars[0][b], label_split[b], eta);
      break;
    case AttackMode::FedsgdEpoch:
      for (int e = 0; e < epochs; ++e)
        theta = sgd_step(g, arch, theta, vars[static_cast<size_t>(e)][0],
                         all_labels, eta);
      break;
    case AttackMode::Fedsgd:
      theta = sgd_step(g, arch, theta, vars[0][0], all_labels, eta);
      break;
  }
  return theta;
}

namespace {

Tensor flatten_params(Graph& g, const std::vector<Tensor>& tensors) {
  std::vector<Tensor> flat;
  flat.reserve(tensors.size());
  for (const Tensor& t : tensors)
    flat.push_back(g.reshape(t, {static_cast<int>(numel(t.shape()))}));
  return g.concat(flat, 0);
}

Tensor aggregate_epoch(Graph& g, Tensor epoch_set, InvAggregate aggregate,
                       Tensor conv_kernel) {
  Tensor features = epoch_set;
  if (aggregate == InvAggregate::ConvMean || aggregate == InvAggregate::ConvMax) {
    if (!conv_kernel.valid())
      throw std::invalid_argument("loss_inv: conv aggregate requires a kernel");
    features = g.conv2d(epoch_set, conv_kernel, /*stride=*/1, /*padding=*/0);
  }
  const int n = features.shape()[0];
  if (aggregate == InvAggregate::Mean || aggregate == InvAggregate::ConvMean)
    return g.mul_scalar(g.sum_axis(features, 0), 1.0 / n);
  return g.max_axis(features, 0);
}

}  // namespace

Tensor loss_sim(Graph& g, Tensor target, Tensor sim) {
  Tensor cos = g.cosine_similarity(target, sim);
  return g.add_scalar(g.neg(cos), 1.0);
}

Tensor loss_inv(Graph& g, const std::vector<Tensor>& epoch_sets,
                InvAggregate aggregate, InvDistance distance,
                Tensor conv_kernel) {
  const int e = static_cast<int>(epoch_sets.size());
  if (e <= 1) return g.scalar_leaf(0.0);
  std::vector<Tensor> features;
  features.reserve(epoch_sets.size());
  for (const Tensor& set : epoch_sets)
    features.push_back(aggregate_epoch(g, set, aggregate, conv_kernel));

  // off-diagonal pairs, each counted twice in the E x E double sum
  Tensor acc;
  for (int i = 0; i < e; ++i)
    for (int j = i + 1; j < e; ++j) {
      Tensor diff = g.sub(features[static_cast<size_t>(i)],
                          features[static_cast<size_t>(j)]);
      Tensor d = distance == InvDistance::L1 ? g.mean_all(g.abs(diff))
                                             : g.mean_all(g.square(diff));
      acc = acc.valid() ? g.add(acc, d) : d;
    }
  return g.mul_scalar(acc, 2.0 / (static_cast<double>(e) * e));
}

Regularizers regularizers(Graph& g, const std::vector<Tensor>& vars,
                          ClipPenalty penalty) {
  if (vars.empty()) throw std::invalid_argument("regularizers: no variables");
  Tensor tv_sum, clip_sum;
  int64_t images = 0, pixels = 0;
  for (const Tensor& v : vars) {
    const Shape& s = v.shape();
    if (s.size() != 4)
      throw std::invalid_argument("regularizers: variables must be (N,C,H,W)");
    const int n = s[0], c = s[1], h = s[2], w = s[3];
    images += n;
    pixels += numel(s);

    if (h > 1) {
      Tensor down = g.slice(v, {0, 0, 1, 0}, {n, c, h - 1, w});
      Tensor up = g.slice(v, {0, 0, 0, 0}, {n, c, h - 1, w});
      Tensor t = g.sum_all(g.abs(g.sub(down, up)));
      tv_sum = tv_sum.valid() ? g.add(tv_sum, t) : t;
    }
    if (w > 1) {
      Tensor right = g.slice(v, {0, 0, 0, 1}, {n, c, h, w - 1});
      Tensor left = g.slice(v, {0, 0, 0, 0}, {n, c, h, w - 1});
      Tensor t = g.sum_all(g.abs(g.sub(right, left)));
      tv_sum = tv_sum.valid() ? g.add(tv_sum, t) : t;
    }

    Tensor over = g.relu(g.add_scalar(v, -1.0));
    Tensor under = g.relu(g.neg(v));
    Tensor c_term = penalty == ClipPenalty::Squared
                        ? g.add(g.sum_all(g.square(over)), g.sum_all(g.square(under)))
                        : g.add(g.sum_all(over), g.sum_all(under));
    clip_sum = clip_sum.valid() ? g.add(clip_sum, c_term) : c_term;
  }
  Regularizers r;
  r.tv = tv_sum.valid() ? g.mul_scalar(tv_sum, 1.0 / static_cast<double>(images))
                        : g.scalar_leaf(0.0);
  r.clip = g.mul_scalar(clip_sum, 1.0 / static_cast<double>(pixels));
  return r;
}

namespace {

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t t = 0;
};

}  // namespace

AttackResult attack(const ObservedUpdate& obs, const LabelCountEstimate& counts,
                    const AttackConfig& cfg, const AttackInit* init) {
  cfg.validate();
  obs.arch.validate();
  int total = 0;
  for (int c : counts.counts) total += c;
  if (total != obs.n_examples)
    throw std::invalid_argument("attack: label counts sum to " +
                                std::to_string(total) + ", update reports " +
                                std::to_string(obs.n_examples) + " examples");

  SeedStream root(cfg.seed);
  auto split = (init && !init->label_split.empty())
                   ? init->label_split
                   : rand_order(counts.counts, obs.batch_size, root.child("order"));
  std::vector<int> batch_sizes;
  batch_sizes.reserve(split.size());
  for (const auto& b : split) batch_sizes.push_back(static_cast<int>(b.size()));

  const int channels = obs.arch.in_channels;
  const int h = obs.arch.in_h;
  const int w = obs.arch.in_w;
  AttackVariables vars = (init && init->has_variables)
                             ? init->variables
                             : rand_init(cfg.mode, batch_sizes, obs.epochs,
                                         channels, h, w, cfg.init, root);
  if (vars.mode != cfg.mode)
    throw std::invalid_argument("attack: initial variables built for mode " +
                                attack_mode_name(vars.mode));

  const bool use_prior =
      cfg.mode == AttackMode::OursPrior && cfg.lambda_inv > 0.0 && obs.epochs > 1;
  const bool use_conv = use_prior && (cfg.aggregate == InvAggregate::ConvMean ||
                                      cfg.aggregate == InvAggregate::ConvMax);
  Array conv_kernel;
  if (use_conv)
    conv_kernel = make_conv_prior_kernel(cfg.conv_prior_channels, channels,
                                         cfg.conv_prior_kernel, root);

  const Array target = averaged_update(obs);
  const int u_sim = simulated_steps(cfg.mode, obs.epochs,
                                    static_cast<int>(split.size()));
  const double sim_scale = 1.0 / (obs.eta * u_sim);

  AdamState adam;
  adam.m.resize(vars.tensor_count());
  adam.v.resize(vars.tensor_count());
  {
    size_t i = 0;
    for (const auto& group : vars.groups)
      for (const Array& a : group) {
        adam.m[i].assign(a.data.size(), 0.0);
        adam.v[i].assign(a.data.size(), 0.0);
        ++i;
      }
  }

  AttackResult result;
  result.label_split = split;
  result.label_counts_used = counts.counts;

  double lr = cfg.eta_rec;
  for (int step = 0; step < cfg.steps; ++step) {
    Graph g;
    GraphParams gp = insert_params(g, obs.theta_s);
    Tensor target_leaf = g.leaf(target);
    Tensor kernel_leaf = use_conv ? g.leaf(conv_kernel) : Tensor();

    std::vector<std::vector<Tensor>> var_nodes;
    std::vector<Tensor> flat_vars;
    for (const auto& group : vars.groups) {
      std::vector<Tensor> nodes;
      for (const Array& a : group) {
        Tensor t = g.leaf(a);
        nodes.push_back(t);
        flat_vars.push_back(t);
      }
      var_nodes.push_back(std::move(nodes));
    }

    std::vector<Tensor> theta_sim =
        sim_update(g, obs.arch, gp.tensors, var_nodes, split, obs.eta,
                   obs.epochs, cfg.mode);
    Tensor delta_sim = g.mul_scalar(
        g.sub(flatten_params(g, gp.tensors), flatten_params(g, theta_sim)),
        sim_scale);
    Tensor l_sim = loss_sim(g, target_leaf, delta_sim);

    Tensor l_inv;
    if (use_prior) {
      std::vector<Tensor> epoch_sets;
      epoch_sets.reserve(var_nodes.size());
      for (const auto& nodes : var_nodes)
        epoch_sets.push_back(nodes.size() == 1 ? nodes[0]
                                               : g.concat(nodes, 0));
      l_inv = loss_inv(g, epoch_sets, cfg.aggregate, cfg.inv_distance,
                       kernel_leaf);
    } else {
      l_inv = g.scalar_leaf(0.0);
    }

    Regularizers reg = regularizers(g, flat_vars, cfg.clip_penalty);

    Tensor total_loss =
        g.add(g.add(l_sim, g.mul_scalar(l_inv, cfg.lambda_inv)),
              g.add(g.mul_scalar(reg.tv, cfg.lambda_tv),
                    g.mul_scalar(reg.clip, cfg.lambda_clip)));

    LossTraceRow row;
    row.step = step;
    row.lr = lr;
    try {
      row.l_sim = l_sim.scalar();
      row.l_inv = l_inv.scalar();
      row.tv = reg.tv.scalar();
      row.clip = reg.clip.scalar();
      row.total = total_loss.scalar();
    } catch (const std::runtime_error& e) {
      throw numeric_error("attack: non-finite loss at step " +
                          std::to_string(step) + " (" + e.what() + ")");
    }
    result.trace.push_back(row);

    GradientMap gm = g.grad(total_loss, flat_vars);

    adam.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.adam.beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(cfg.adam.beta2, static_cast<double>(adam.t));
    size_t vi = 0;
    for (auto& group : vars.groups) {
      for (Array& a : group) {
        const auto& grad = gm[vi].data();
        auto& m = adam.m[vi];
        auto& v = adam.v[vi];
        for (size_t i = 0; i < a.data.size(); ++i) {
          const double gval = grad[i];
          if (!std::isfinite(gval))
            throw numeric_error("attack: non-finite gradient at step " +
                                std::to_string(step));
          m[i] = cfg.adam.beta1 * m[i] + (1.0 - cfg.adam.beta1) * gval;
          v[i] = cfg.adam.beta2 * v[i] + (1.0 - cfg.adam.beta2) * gval * gval;
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          a.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam.eps);
        }
        ++vi;
      }
    }
    if ((step + 1) % cfg.decay_every == 0) lr *= cfg.decay;
  }

  // flat per-epoch reconstructions in batch-major order
  const int64_t image_size = static_cast<int64_t>(channels) * h * w;
  for (const auto& group : vars.groups) {
    std::vector<Array> epoch_images;
    for (const Array& a : group) {
      const int n = a.shape[0];
      for (int i = 0; i < n; ++i) {
        Array img({channels, h, w});
        std::copy_n(a.data.begin() + static_cast<int64_t>(i) * image_size,
                    image_size, img.data.begin());
        epoch_images.push_back(std::move(img));
      }
    }
    result.epoch_recons.push_back(std::move(epoch_images));
  }
  result.finals = match_epoch(result.epoch_recons);
  return result;
}

}  // namespace fedleak
