#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <map>

#include "doctest.h"
#include "fedleak/attack.hpp"
#include "fedleak/io.hpp"

using namespace fedleak;

namespace {

struct Scenario {
  Architecture arch;
  ClientDataset data;
  Parameters theta_s;
  FedAvgConfig cfg;
  ObservedUpdate obs;
};

Scenario make_scenario(int classes, int per_class, int m, int epochs,
                       double eta, uint64_t seed, bool consistent) {
  Scenario s;
  s.arch = Architecture::mlp(1, 8, 8, {16}, classes);
  s.data = generate_synthetic(classes, per_class, 1, 8, 8, seed);
  s.theta_s = init_params(s.arch, seed + 1);
  s.cfg.eta = eta;
  s.cfg.batch_size = m;
  s.cfg.epochs = epochs;
  s.cfg.partition_seed = seed + 2;
  s.cfg.consistent_batches = consistent;
  s.obs.arch = s.arch;
  s.obs.theta_s = s.theta_s;
  s.obs.theta_c = client_update(s.data, s.arch, s.theta_s, s.cfg).theta_c;
  s.obs.eta = eta;
  s.obs.batch_size = m;
  s.obs.epochs = epochs;
  s.obs.n_examples = s.data.size();
  return s;
}

// variables wired to the client's true batches (requires consistent batches)
AttackVariables ground_truth_vars(const Scenario& s, AttackMode mode) {
  auto batches = epoch_partition(s.cfg, s.data.size(), 1);
  AttackVariables vars;
  vars.mode = mode;
  vars.epochs = s.cfg.epochs;
  const int groups = (mode == AttackMode::Shared || mode == AttackMode::Fedsgd)
                         ? 1
                         : s.cfg.epochs;
  for (int e = 0; e < groups; ++e) {
    std::vector<Array> group;
    for (const auto& idx : batches) group.push_back(s.data.gather(idx));
    vars.groups.push_back(std::move(group));
  }
  return vars;
}

std::vector<std::vector<int>> true_split(const Scenario& s) {
  auto batches = epoch_partition(s.cfg, s.data.size(), 1);
  std::vector<std::vector<int>> split;
  for (const auto& idx : batches) split.push_back(s.data.gather_labels(idx));
  return split;
}

LabelCountEstimate oracle_counts(const Scenario& s) {
  LabelCountEstimate est;
  est.counts = s.data.label_counts();
  est.raw.assign(est.counts.begin(), est.counts.end());
  est.total = s.data.size();
  return est;
}

}  // namespace

TEST_CASE("rand_order expands counts into batches") {
  auto split = rand_order({2, 0}, 1, SeedStream(1));
  REQUIRE(split.size() == 2);
  CHECK(split[0] == std::vector<int>{0});
  CHECK(split[1] == std::vector<int>{0});
}

TEST_CASE("rand_order conserves the label multiset and is seed-stable") {
  std::vector<int> counts{3, 1, 4};
  auto a = rand_order(counts, 3, SeedStream(7));
  auto b = rand_order(counts, 3, SeedStream(7));
  CHECK(a == b);
  std::map<int, int> seen;
  size_t total = 0;
  for (const auto& batch : a) {
    total += batch.size();
    for (int y : batch) seen[y]++;
  }
  CHECK(total == 8);
  CHECK(seen[0] == 3);
  CHECK(seen[1] == 1);
  CHECK(seen[2] == 4);
  CHECK(a[0].size() == 3);
  CHECK(a[2].size() == 2);  // last partial batch
}

TEST_CASE("rand_init variable counts per mode") {
  std::vector<int> sizes{2, 2, 1};
  SeedStream s(3);
  auto ours = rand_init(AttackMode::OursPrior, sizes, 3, 1, 4, 4,
                        InitDist::Uniform, s);
  CHECK(ours.tensor_count() == 9);
  CHECK(ours.groups.size() == 3);
  auto shared = rand_init(AttackMode::Shared, sizes, 3, 1, 4, 4,
                          InitDist::Uniform, s);
  CHECK(shared.tensor_count() == 3);
  auto per_epoch = rand_init(AttackMode::FedsgdEpoch, sizes, 3, 1, 4, 4,
                             InitDist::Uniform, s);
  CHECK(per_epoch.tensor_count() == 3);
  CHECK(per_epoch.groups[0][0].shape == Shape{5, 1, 4, 4});
  auto single = rand_init(AttackMode::Fedsgd, sizes, 3, 1, 4, 4,
                          InitDist::Uniform, s);
  CHECK(single.tensor_count() == 1);
  CHECK(single.groups[0][0].shape == Shape{5, 1, 4, 4});
  // init values land in [0,1]
  for (double v : ours.groups[0][0].data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("simulated replay of the true batches reproduces theta_c bit-exactly") {
  for (uint64_t seed : {10u, 11u, 12u}) {
    Scenario s = make_scenario(3, 2, 2, 2, 0.15, seed, /*consistent=*/true);
    AttackVariables vars = ground_truth_vars(s, AttackMode::OursPrior);
    auto split = true_split(s);

    Graph g;
    GraphParams gp = insert_params(g, s.theta_s);
    std::vector<std::vector<Tensor>> var_nodes;
    for (const auto& group : vars.groups) {
      std::vector<Tensor> nodes;
      for (const Array& a : group) nodes.push_back(g.leaf(a));
      var_nodes.push_back(std::move(nodes));
    }
    auto theta_sim = sim_update(g, s.arch, gp.tensors, var_nodes, split,
                                s.cfg.eta, s.cfg.epochs, AttackMode::OursPrior);
    REQUIRE(theta_sim.size() == s.obs.theta_c.tensors.size());
    for (size_t i = 0; i < theta_sim.size(); ++i)
      CHECK(theta_sim[i].data() == s.obs.theta_c.tensors[i].data);
  }
}

TEST_CASE("zero learning rate leaves the simulated weights at theta_s") {
  Scenario s = make_scenario(2, 2, 2, 2, 0.1, 20, true);
  AttackVariables vars = ground_truth_vars(s, AttackMode::OursPrior);
  Graph g;
  GraphParams gp = insert_params(g, s.theta_s);
  std::vector<std::vector<Tensor>> var_nodes;
  for (const auto& group : vars.groups) {
    std::vector<Tensor> nodes;
    for (const Array& a : group) nodes.push_back(g.leaf(a));
    var_nodes.push_back(std::move(nodes));
  }
  auto theta_sim = sim_update(g, s.arch, gp.tensors, var_nodes, true_split(s),
                              0.0, s.cfg.epochs, AttackMode::OursPrior);
  for (size_t i = 0; i < theta_sim.size(); ++i)
    CHECK(theta_sim[i].data() == s.theta_s.tensors[i].data);
}

TEST_CASE("single-epoch modes coincide") {
  Scenario s = make_scenario(3, 2, 2, 1, 0.2, 30, true);
  LabelCountEstimate counts = oracle_counts(s);

  auto run = [&](AttackMode mode) {
    AttackConfig cfg;
    cfg.mode = mode;
    cfg.steps = 5;
    cfg.eta_rec = 0.1;
    cfg.lambda_inv = mode == AttackMode::OursPrior ? 10.0 : 0.0;
    cfg.lambda_tv = 0.001;
    cfg.lambda_clip = 2.0;
    cfg.seed = 99;
    return attack(s.obs, counts, cfg);
  };

  auto ours = run(AttackMode::OursPrior);
  auto no_prior = run(AttackMode::OursNoPrior);
  auto shared = run(AttackMode::Shared);
  auto fedsgd_epoch = run(AttackMode::FedsgdEpoch);
  auto fedsgd = run(AttackMode::Fedsgd);

  // with E=1 the prior vanishes and the three per-batch modes are the same
  // computation; the two full-set modes likewise
  for (size_t i = 0; i < ours.trace.size(); ++i) {
    CHECK(ours.trace[i].total == no_prior.trace[i].total);
    CHECK(ours.trace[i].total == shared.trace[i].total);
    CHECK(fedsgd_epoch.trace[i].total == fedsgd.trace[i].total);
  }
}

TEST_CASE("cosine distance loss values") {
  Graph g;
  Tensor u = g.leaf({3}, {1.0, 2.0, 3.0});
  CHECK(loss_sim(g, u, u).scalar() < 1e-15);
  Tensor nu = g.neg(u);
  CHECK(loss_sim(g, u, nu).scalar() == doctest::Approx(2.0).epsilon(1e-12));
  Tensor a = g.leaf({2}, {1.0, 0.0});
  Tensor b = g.leaf({2}, {0.0, 1.0});
  CHECK(loss_sim(g, a, b).scalar() == doctest::Approx(1.0).epsilon(1e-12));
  Tensor z = g.full({3}, 0.0);
  CHECK(loss_sim(g, u, z).scalar() == 1.0);
}

TEST_CASE("epoch prior vanishes when all epochs hold identical variables") {
  Graph g;
  SeedStream s(40);
  Array imgs({4, 1, 6, 6});
  for (double& v : imgs.data) v = s.uniform();
  Tensor e1 = g.leaf(imgs);
  Tensor e2 = g.leaf(imgs);
  Array kval = make_conv_prior_kernel(8, 1, 3, SeedStream(41));
  Tensor k = g.leaf(kval);
  for (auto agg : {InvAggregate::Mean, InvAggregate::Max, InvAggregate::ConvMean,
                   InvAggregate::ConvMax})
    for (auto dist : {InvDistance::L1, InvDistance::L2}) {
      Tensor l = loss_inv(g, {e1, e2}, agg, dist, k);
      CHECK(std::abs(l.scalar()) < 1e-12);
    }
}

TEST_CASE("epoch prior is exactly invariant to within-epoch permutations") {
  SeedStream s(50);
  Array imgs({5, 1, 6, 6});
  for (double& v : imgs.data) v = s.uniform();
  Array other({5, 1, 6, 6});
  for (double& v : other.data) v = s.uniform();
  // permute the images of the second epoch
  Array permuted(other.shape);
  const std::vector<int> perm{3, 1, 4, 0, 2};
  const int64_t row = 36;
  for (int i = 0; i < 5; ++i)
    std::copy_n(other.data.begin() + perm[static_cast<size_t>(i)] * row, row,
                permuted.data.begin() + i * row);
  Array kval = make_conv_prior_kernel(8, 1, 3, SeedStream(51));

  for (auto agg : {InvAggregate::Mean, InvAggregate::Max, InvAggregate::ConvMean,
                   InvAggregate::ConvMax})
    for (auto dist : {InvDistance::L1, InvDistance::L2}) {
      Graph g;
      Tensor k = g.leaf(kval);
      const double base =
          loss_inv(g, {g.leaf(imgs), g.leaf(other)}, agg, dist, k).scalar();
      const double moved =
          loss_inv(g, {g.leaf(imgs), g.leaf(permuted)}, agg, dist, k).scalar();
      CHECK(base == moved);  // bit-exact
    }
}

TEST_CASE("single-epoch prior is zero") {
  Graph g;
  Tensor e1 = g.full({3, 1, 4, 4}, 0.5);
  CHECK(loss_inv(g, {e1}, InvAggregate::Mean, InvDistance::L2).scalar() == 0.0);
}

TEST_CASE("regularizer values on reference images") {
  Graph g;
  // constant in-range image: both terms vanish
  Tensor flat = g.full({1, 1, 4, 4}, 0.7);
  Regularizers r1 = regularizers(g, {flat}, ClipPenalty::Squared);
  CHECK(r1.tv.scalar() == 0.0);
  CHECK(r1.clip.scalar() == 0.0);

  // all-twos image: squared hinge contributes (2-1)^2 = 1 per pixel
  Tensor twos = g.full({1, 1, 3, 3}, 2.0);
  Regularizers r2 = regularizers(g, {twos}, ClipPenalty::Squared);
  CHECK(r2.clip.scalar() == doctest::Approx(1.0).epsilon(1e-12));

  // vertical step edge on an n x n image: one unit jump per row
  const int n = 6;
  Array step({1, 1, n, n}, 0.0);
  for (int y = 0; y < n; ++y)
    for (int x = n / 2; x < n; ++x)
      step.data[static_cast<size_t>(y * n + x)] = 1.0;
  Regularizers r3 = regularizers(g, {g.leaf(step)}, ClipPenalty::Squared);
  CHECK(r3.tv.scalar() == doctest::Approx(static_cast<double>(n)).epsilon(1e-12));
  CHECK(r3.clip.scalar() == 0.0);

  // linear hinge option: all-twos contributes 1 per pixel as well
  Regularizers r4 = regularizers(g, {twos}, ClipPenalty::Linear);
  CHECK(r4.clip.scalar() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ground-truth initialization leaves only the regularizer terms") {
  Scenario s = make_scenario(4, 2, 2, 3, 0.2, 60, /*consistent=*/true);
  LabelCountEstimate counts = oracle_counts(s);
  AttackInit init;
  init.label_split = true_split(s);
  init.variables = ground_truth_vars(s, AttackMode::OursPrior);
  init.has_variables = true;

  AttackConfig cfg;
  cfg.mode = AttackMode::OursPrior;
  cfg.steps = 1;
  cfg.eta_rec = 0.01;
  cfg.lambda_inv = 25.0;
  cfg.lambda_tv = 0.001;
  cfg.lambda_clip = 2.0;
  cfg.seed = 61;
  AttackResult res = attack(s.obs, counts, cfg, &init);

  REQUIRE(res.trace.size() == 1);
  const LossTraceRow& row = res.trace[0];
  CHECK(row.l_sim < 1e-9);
  // true inputs sit in [0,1], so the clip term vanishes and the total is
  // l_sim + lambda_inv * l_inv + lambda_tv * tv
  CHECK(row.clip == 0.0);
  CHECK(row.total == doctest::Approx(row.l_sim + 25.0 * row.l_inv +
                                     0.001 * row.tv)
                         .epsilon(1e-12));
}

TEST_CASE("attack is deterministic per seed") {
  Scenario s = make_scenario(2, 2, 2, 2, 0.2, 70, false);
  LabelCountEstimate counts = oracle_counts(s);
  AttackConfig cfg;
  cfg.mode = AttackMode::OursPrior;
  cfg.steps = 30;
  cfg.eta_rec = 0.2;
  cfg.lambda_inv = 10.0;
  cfg.seed = 71;
  AttackResult a = attack(s.obs, counts, cfg);
  AttackResult b = attack(s.obs, counts, cfg);
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i)
    CHECK(a.trace[i].total == b.trace[i].total);
  for (size_t i = 0; i < a.finals.size(); ++i)
    CHECK(a.finals[i].data == b.finals[i].data);
}

TEST_CASE("learning rate decays at exact step multiples") {
  Scenario s = make_scenario(2, 1, 2, 1, 0.1, 80, false);
  LabelCountEstimate counts = oracle_counts(s);
  AttackConfig cfg;
  cfg.mode = AttackMode::Fedsgd;
  cfg.steps = 21;
  cfg.eta_rec = 0.4;
  cfg.decay = 0.5;
  cfg.decay_every = 7;
  cfg.lambda_inv = 0.0;
  cfg.seed = 81;
  AttackResult res = attack(s.obs, counts, cfg);
  CHECK(res.trace[0].lr == 0.4);
  CHECK(res.trace[6].lr == 0.4);
  CHECK(res.trace[7].lr == 0.2);
  CHECK(res.trace[13].lr == 0.2);
  CHECK(res.trace[14].lr == 0.1);
  CHECK(res.trace[20].lr == 0.05);
}

TEST_CASE("mismatched label counts are rejected") {
  Scenario s = make_scenario(2, 2, 2, 1, 0.1, 90, false);
  LabelCountEstimate counts = oracle_counts(s);
  counts.counts[0] += 1;
  AttackConfig cfg;
  CHECK_THROWS_AS(attack(s.obs, counts, cfg), std::invalid_argument);
}

TEST_CASE("plain gradient matching drives a single-image loss to near zero") {
  // FedSGD update of one example, no regularizers: the optimizer should
  // reach a small cosine distance well within the step budget
  Scenario s = make_scenario(2, 1, 2, 1, 0.1, 95, false);
  REQUIRE(s.data.size() == 2);
  // shrink to a single example
  ClientDataset one;
  one.num_classes = 2;
  one.inputs = s.data.gather({0});
  one.labels = {s.data.labels[0]};
  s.cfg.batch_size = 1;
  s.obs.theta_c = client_update(one, s.arch, s.theta_s, s.cfg).theta_c;
  s.obs.batch_size = 1;
  s.obs.n_examples = 1;

  LabelCountEstimate counts;
  counts.counts = {0, 0};
  counts.counts[static_cast<size_t>(one.labels[0])] = 1;
  counts.total = 1;

  AttackConfig cfg;
  cfg.mode = AttackMode::Fedsgd;
  cfg.steps = 2000;
  cfg.eta_rec = 0.1;
  cfg.decay = 0.995;
  cfg.decay_every = 10;
  cfg.lambda_inv = 0.0;
  cfg.lambda_tv = 0.0;
  cfg.lambda_clip = 0.0;
  cfg.seed = 96;
  AttackResult res = attack(s.obs, counts, cfg);
  CHECK(res.trace.back().l_sim < 1e-3);
}
