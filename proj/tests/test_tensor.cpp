#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "fedleak/random.hpp"
#include "fedleak/tensor.hpp"

using namespace fedleak;

namespace {

Array random_array(Shape shape, SeedStream& s, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (double& v : a.data) v = s.uniform(lo, hi);
  return a;
}

// Random two-layer MLP head with CE loss, built from raw graph ops. The
// parameter layout is one flat vector so finite differences can probe it.
struct TinyNet {
  int in = 4, hidden = 5, classes = 3, batch = 2;
  std::vector<int> labels{0, 2};

  int64_t param_count() const {
    return static_cast<int64_t>(in) * hidden + hidden +
           static_cast<int64_t>(hidden) * classes + classes;
  }

  Tensor loss(Graph& g, Tensor x, Tensor flat) const {
    int64_t off = 0;
    auto take = [&](Shape s) {
      const int n = static_cast<int>(numel(s));
      Tensor t = g.reshape(
          g.slice(flat, {static_cast<int>(off)}, {n}), s);
      off += n;
      return t;
    };
    Tensor w1 = take({in, hidden});
    Tensor b1 = take({hidden});
    Tensor w2 = take({hidden, classes});
    Tensor b2 = take({classes});
    Tensor h = g.relu(g.add(g.matmul(x, w1), b1));
    Tensor z = g.add(g.matmul(h, w2), b2);
    return g.cross_entropy_with_softmax(z, labels);
  }
};

}  // namespace

TEST_CASE("relu forward values") {
  Graph g;
  Tensor t = g.relu(g.leaf({2}, {-1.0, 2.5}));
  CHECK(t.data()[0] == 0.0);
  CHECK(t.data()[1] == 2.5);
}

TEST_CASE("conv2d with a one-hot 1x1 kernel is the identity") {
  Graph g;
  SeedStream s(7);
  Array img = random_array({1, 1, 5, 4}, s, 0.0, 1.0);
  Tensor x = g.leaf(img);
  Tensor k = g.leaf({1, 1, 1, 1}, {1.0});
  Tensor y = g.conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 5, 4});
  for (size_t i = 0; i < img.data.size(); ++i) CHECK(y.data()[i] == img.data[i]);
}

TEST_CASE("cosine similarity of a vector with itself is 1") {
  Graph g;
  SeedStream s(8);
  Tensor u = g.leaf(random_array({6}, s));
  CHECK(g.cosine_similarity(u, u).scalar() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cosine similarity with a zero vector is 0") {
  Graph g;
  Tensor u = g.leaf({3}, {1.0, 2.0, 3.0});
  Tensor z = g.full({3}, 0.0);
  CHECK(g.cosine_similarity(u, z).scalar() == 0.0);
}

TEST_CASE("shape mismatches raise errors naming the op") {
  Graph g;
  Tensor a = g.full({2, 3}, 1.0);
  Tensor b = g.full({4, 2}, 1.0);
  CHECK_THROWS_WITH_AS(g.matmul(a, b),
                       doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_AS(g.add(g.full({2, 3}, 0.0), g.full({2, 2}, 0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(g.slice(a, {0, 2}, {2, 2}), std::invalid_argument);
}

TEST_CASE("grad of x^2 at 3 is 6") {
  Graph g;
  Tensor x = g.scalar_leaf(3.0);
  Tensor y = g.mul(x, x);
  GradientMap gm = g.grad(y, {x});
  CHECK(gm[0].scalar() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("second derivative of x^3 at 2 is 12") {
  Graph g;
  Tensor x = g.scalar_leaf(2.0);
  Tensor y = g.mul(g.mul(x, x), x);
  Tensor dy = g.grad(y, {x})[0];
  Tensor d2y = g.grad(dy, {x})[0];
  CHECK(d2y.scalar() == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("third derivative through exp survives repeated grad") {
  Graph g;
  Tensor x = g.scalar_leaf(0.3);
  Tensor y = g.exp(g.mul(x, x));  // y = e^(x^2)
  Tensor d1 = g.grad(y, {x})[0];
  Tensor d2 = g.grad(d1, {x})[0];
  Tensor d3 = g.grad(d2, {x})[0];
  // d3/dx3 e^(x^2) = (12x + 8x^3) e^(x^2)
  const double xv = 0.3;
  const double expect = (12 * xv + 8 * xv * xv * xv) * std::exp(xv * xv);
  CHECK(d3.scalar() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("grad of unreachable leaf is zero, not an error") {
  Graph g;
  Tensor x = g.scalar_leaf(1.0);
  Tensor z = g.scalar_leaf(5.0);
  Tensor y = g.mul(x, x);
  GradientMap gm = g.grad(y, {z});
  CHECK(gm[0].scalar() == 0.0);
}

TEST_CASE("grad of a non-scalar output is an error") {
  Graph g;
  Tensor x = g.full({3}, 2.0);
  CHECK_THROWS_AS(g.grad(g.mul(x, x), {x}), std::invalid_argument);
}

TEST_CASE("relu derivative at exactly 0 is 0") {
  Graph g;
  Tensor x = g.leaf({3}, {-1.0, 0.0, 2.0});
  Tensor y = g.sum_all(g.relu(x));
  GradientMap gm = g.grad(y, {x});
  CHECK(gm[0].data()[0] == 0.0);
  CHECK(gm[0].data()[1] == 0.0);
  CHECK(gm[0].data()[2] == 1.0);
}

TEST_CASE("max-reduce ties route to the first maximal element") {
  Graph g;
  Tensor x = g.leaf({3}, {3.0, 3.0, 1.0});
  Tensor y = g.max_all(x);
  CHECK(y.scalar() == 3.0);
  GradientMap gm = g.grad(y, {x});
  CHECK(gm[0].data()[0] == 1.0);
  CHECK(gm[0].data()[1] == 0.0);
  CHECK(gm[0].data()[2] == 0.0);
}

TEST_CASE("broadcast add with row vector") {
  Graph g;
  Tensor a = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = g.leaf({3}, {10, 20, 30});
  Tensor c = g.add(a, b);
  CHECK(c.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
  // gradient of sum w.r.t. the broadcast operand collapses correctly
  GradientMap gm = g.grad(g.sum_all(c), {b});
  CHECK(gm[0].data() == std::vector<double>{2, 2, 2});
}

TEST_CASE("softmax rows sum to one") {
  Graph g;
  SeedStream s(11);
  Tensor z = g.leaf(random_array({4, 7}, s, -30.0, 30.0));
  Tensor p = g.softmax(z);
  for (int i = 0; i < 4; ++i) {
    double row = 0.0;
    for (int k = 0; k < 7; ++k) row += p.data()[static_cast<size_t>(i) * 7 + k];
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("finite_difference on sum of squares") {
  auto fn = [](const Array& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v * v;
    return acc;
  };
  Array at({2}, {1.0, 2.0});
  Array fd = finite_difference(fn, at, 1e-5);
  CHECK(fd.data[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(fd.data[1] == doctest::Approx(4.0).epsilon(1e-8));
}

TEST_CASE("finite_difference of a constant is zero") {
  auto fn = [](const Array&) { return 3.5; };
  Array fd = finite_difference(fn, Array({4}, 1.0), 1e-5);
  for (double v : fd.data) CHECK(v == 0.0);
}

TEST_CASE("CE gradients match finite differences on a tiny MLP") {
  TinyNet net;
  SeedStream s(21);
  Array xv = random_array({net.batch, net.in}, s, 0.0, 1.0);
  Array pv = random_array({static_cast<int>(net.param_count())}, s, -0.5, 0.5);

  Graph g;
  Tensor x = g.leaf(xv);
  Tensor p = g.leaf(pv);
  Tensor loss = net.loss(g, x, p);
  GradientMap gm = g.grad(loss, {x, p});

  auto loss_of_x = [&](const Array& probe) {
    Graph h;
    return net.loss(h, h.leaf(probe), h.leaf(pv)).scalar();
  };
  auto loss_of_p = [&](const Array& probe) {
    Graph h;
    return net.loss(h, h.leaf(xv), h.leaf(probe)).scalar();
  };
  Array fdx = finite_difference(loss_of_x, xv, 1e-5);
  Array fdp = finite_difference(loss_of_p, pv, 1e-5);
  for (size_t i = 0; i < fdx.data.size(); ++i)
    if (std::abs(gm[0].data()[i]) > 1e-6)
      CHECK(fdx.data[i] ==
            doctest::Approx(gm[0].data()[i]).epsilon(1e-4));
  for (size_t i = 0; i < fdp.data.size(); ++i)
    if (std::abs(gm[1].data()[i]) > 1e-6)
      CHECK(fdp.data[i] ==
            doctest::Approx(gm[1].data()[i]).epsilon(1e-4));
}

TEST_CASE("conv/pool network gradients match finite differences") {
  // conv 2ch -> relu -> avgpool -> linear head, parameters in one flat vector
  SeedStream s(33);
  const std::vector<int> labels{1, 0};
  auto build = [&](Graph& g, const Array& xin, const Array& flat) {
    Tensor x = g.leaf(xin);
    Tensor p = g.leaf(flat);
    Tensor k = g.reshape(g.slice(p, {0}, {2 * 1 * 3 * 3}), {2, 1, 3, 3});
    Tensor kb = g.reshape(g.slice(p, {18}, {2}), {2, 1, 1});
    Tensor lw = g.reshape(g.slice(p, {20}, {2 * 2 * 2 * 2}), {8, 2});
    Tensor lb = g.slice(p, {36}, {2});
    Tensor h1 = g.relu(g.add(g.conv2d(x, k, 1, 1), kb));
    Tensor h2 = g.avgpool2d(h1, 2, 2);  // (N,2,2,2)
    Tensor flat2 = g.reshape(h2, {2, 8});
    Tensor z = g.add(g.matmul(flat2, lw), lb);
    return g.cross_entropy_with_softmax(z, labels);
  };
  Array xv = random_array({2, 1, 4, 4}, s, 0.0, 1.0);
  Array pv = random_array({38}, s, -0.4, 0.4);

  Graph g;
  Tensor x = g.leaf(xv);
  Tensor p = g.leaf(pv);
  // rebuild so grads refer to these leaves
  Tensor k = g.reshape(g.slice(p, {0}, {18}), {2, 1, 3, 3});
  Tensor kb = g.reshape(g.slice(p, {18}, {2}), {2, 1, 1});
  Tensor lw = g.reshape(g.slice(p, {20}, {16}), {8, 2});
  Tensor lb = g.slice(p, {36}, {2});
  Tensor h1 = g.relu(g.add(g.conv2d(x, k, 1, 1), kb));
  Tensor h2 = g.avgpool2d(h1, 2, 2);
  Tensor z = g.add(g.matmul(g.reshape(h2, {2, 8}), lw), lb);
  Tensor loss = g.cross_entropy_with_softmax(z, labels);
  GradientMap gm = g.grad(loss, {x, p});

  Array fdx = finite_difference(
      [&](const Array& probe) {
        Graph h;
        return build(h, probe, pv).scalar();
      },
      xv, 1e-5);
  Array fdp = finite_difference(
      [&](const Array& probe) {
        Graph h;
        return build(h, xv, probe).scalar();
      },
      pv, 1e-5);
  for (size_t i = 0; i < fdx.data.size(); ++i)
    if (std::abs(gm[0].data()[i]) > 1e-6)
      CHECK(fdx.data[i] == doctest::Approx(gm[0].data()[i]).epsilon(1e-4));
  for (size_t i = 0; i < fdp.data.size(); ++i)
    if (std::abs(gm[1].data()[i]) > 1e-6)
      CHECK(fdp.data[i] == doctest::Approx(gm[1].data()[i]).epsilon(1e-4));
}

TEST_CASE("gradient check over 20 seeded random MLPs") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    SeedStream s(seed);
    TinyNet net;
    net.in = 2 + static_cast<int>(s.uniform_int(4));
    net.hidden = 2 + static_cast<int>(s.uniform_int(6));
    net.classes = 2 + static_cast<int>(s.uniform_int(3));
    net.batch = 1 + static_cast<int>(s.uniform_int(3));
    net.labels.resize(static_cast<size_t>(net.batch));
    for (int& y : net.labels)
      y = static_cast<int>(s.uniform_int(static_cast<uint64_t>(net.classes)));
    REQUIRE(net.param_count() <= 500);

    Array xv = random_array({net.batch, net.in}, s, 0.0, 1.0);
    Array pv = random_array({static_cast<int>(net.param_count())}, s, -0.6, 0.6);

    Graph g;
    Tensor x = g.leaf(xv);
    Tensor p = g.leaf(pv);
    GradientMap gm = g.grad(net.loss(g, x, p), {p});
    Array fdp = finite_difference(
        [&](const Array& probe) {
          Graph h;
          return net.loss(h, h.leaf(xv), h.leaf(probe)).scalar();
        },
        pv, 1e-5);
    for (size_t i = 0; i < fdp.data.size(); ++i)
      if (std::abs(gm[0].data()[i]) > 1e-6)
        CHECK(fdp.data[i] == doctest::Approx(gm[0].data()[i]).epsilon(1e-4));
  }
}

TEST_CASE("grad is linear over shared leaves") {
  Graph g;
  SeedStream s(55);
  Tensor x = g.leaf(random_array({5}, s));
  Tensor f = g.sum_all(g.mul(x, x));
  Tensor h = g.sum_all(g.exp(x));
  const double a = 2.5, b = -1.25;
  Tensor combo = g.add(g.mul_scalar(f, a), g.mul_scalar(h, b));
  Tensor gc = g.grad(combo, {x})[0];
  Tensor gf = g.grad(f, {x})[0];
  Tensor gh = g.grad(h, {x})[0];
  for (size_t i = 0; i < 5; ++i) {
    const double expect = a * gf.data()[i] + b * gh.data()[i];
    CHECK(std::abs(gc.data()[i] - expect) < 1e-12);
  }
}

TEST_CASE("double backprop: grad of squared gradient norm matches FD") {
  TinyNet net;
  net.in = 3;
  net.hidden = 4;
  net.classes = 3;
  net.batch = 2;
  net.labels = {2, 1};
  SeedStream s(77);
  Array xv = random_array({net.batch, net.in}, s, 0.0, 1.0);
  Array pv = random_array({static_cast<int>(net.param_count())}, s, -0.5, 0.5);

  auto grad_norm_sq = [&](Graph& g, const Array& xin) {
    Tensor x = g.leaf(xin);
    Tensor p = g.leaf(pv);
    Tensor loss = net.loss(g, x, p);
    Tensor gp = g.grad(loss, {p})[0];
    return std::pair<Tensor, Tensor>(g.sum_all(g.mul(gp, gp)), x);
  };

  Graph g;
  auto [norm_sq, x] = grad_norm_sq(g, xv);
  Tensor outer = g.grad(norm_sq, {x})[0];

  Array fd = finite_difference(
      [&](const Array& probe) {
        Graph h;
        return grad_norm_sq(h, probe).first.scalar();
      },
      xv, 1e-5);
  for (size_t i = 0; i < fd.data.size(); ++i)
    if (std::abs(outer.data()[i]) > 1e-6)
      CHECK(fd.data[i] == doctest::Approx(outer.data()[i]).epsilon(1e-3));
}

TEST_CASE("identical graphs evaluate bit-identically") {
  auto run = [] {
    Graph g;
    SeedStream s(99);
    Tensor x = g.leaf(random_array({3, 1, 6, 6}, s, 0.0, 1.0));
    Tensor k = g.leaf(random_array({2, 1, 3, 3}, s));
    Tensor y = g.avgpool2d(g.relu(g.conv2d(x, k, 1, 1)), 2, 2);
    Tensor loss = g.mean_all(g.mul(y, y));
    GradientMap gm = g.grad(loss, {x, k});
    std::vector<double> out = loss.data();
    out.insert(out.end(), gm[0].data().begin(), gm[0].data().end());
    out.insert(out.end(), gm[1].data().begin(), gm[1].data().end());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite values are caught at evaluation boundaries") {
  Graph g;
  Tensor x = g.scalar_leaf(-1.0);
  Tensor y = g.log(x);
  CHECK_THROWS_AS(y.scalar(), std::runtime_error);
  CHECK_THROWS_AS(g.check_finite(y), std::runtime_error);
}

TEST_CASE("concat and slice round-trip with gradients") {
  Graph g;
  Tensor a = g.leaf({2, 2}, {1, 2, 3, 4});
  Tensor b = g.leaf({1, 2}, {5, 6});
  Tensor c = g.concat(a, b, 0);
  CHECK(c.shape() == Shape{3, 2});
  CHECK(c.data() == std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor back = g.slice(c, {2, 0}, {1, 2});
  CHECK(back.data() == std::vector<double>{5, 6});
  // d(sum of 2*top block)/da == 2 everywhere, db == 0
  Tensor top = g.slice(c, {0, 0}, {2, 2});
  GradientMap gm = g.grad(g.sum_all(g.mul_scalar(top, 2.0)), {a, b});
  for (double v : gm[0].data()) CHECK(v == 2.0);
  for (double v : gm[1].data()) CHECK(v == 0.0);
}

TEST_CASE("dot and l2_norm compose") {
  Graph g;
  Tensor u = g.leaf({3}, {3.0, 0.0, 4.0});
  CHECK(g.l2_norm(u).scalar() == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(g.dot(u, u).scalar() == doctest::Approx(25.0).epsilon(1e-14));
}
