#include "fedleak/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace fedleak {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

Array::Array(Shape s, double fill)
    : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), fill) {}

Array::Array(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("Array: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
}

namespace {

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// Right-aligned strides of `in` against the broadcast output shape `os`;
// 0 where the input extent is 1 (or the dimension is missing).
std::vector<int64_t> aligned_strides(const Shape& in, const Shape& os) {
  auto ist = row_major_strides(in);
  const int R = static_cast<int>(os.size());
  const int r = static_cast<int>(in.size());
  std::vector<int64_t> out(static_cast<size_t>(R), 0);
  for (int d = 0; d < r; ++d) {
    int od = R - r + d;
    size_t du = static_cast<size_t>(d), odu = static_cast<size_t>(od);
    out[odu] = (in[du] == 1 && os[odu] != 1) ? 0 : ist[du];
  }
  return out;
}

// Shewchuk expansion summation: the result is the correctly rounded exact
// sum, so reductions are invariant to summand order bit-for-bit.
class ExactSum {
 public:
  void add(double x) {
    size_t used = 0;
    for (size_t i = 0; i < partials_.size(); ++i) {
      double y = partials_[i];
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[used++] = lo;
      x = hi;
    }
    partials_.resize(used);
    partials_.push_back(x);
  }

  double result() const {
    double hi = 0.0;
    size_t n = partials_.size();
    if (n > 0) {
      hi = partials_[--n];
      double lo = 0.0;
      while (n > 0) {
        const double x = hi;
        const double y = partials_[--n];
        hi = x + y;
        const double yr = hi - x;
        lo = y - yr;
        if (lo != 0.0) break;
      }
      // half-even rounding across the remaining partials
      if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) ||
                    (lo > 0.0 && partials_[n - 1] > 0.0))) {
        const double y = lo * 2.0;
        const double x = hi + y;
        if (y == x - hi) hi = x;
      }
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

bool broadcastable(const Shape& in, const Shape& out) {
  if (in.size() > out.size()) return false;
  int off = static_cast<int>(out.size() - in.size());
  for (size_t d = 0; d < in.size(); ++d) {
    int i = in[d], o = out[d + static_cast<size_t>(off)];
    if (i != o && i != 1) return false;
  }
  return true;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const int R = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(static_cast<size_t>(R));
  for (int d = 0; d < R; ++d) {
    int ad = d - (R - static_cast<int>(a.size()));
    int bd = d - (R - static_cast<int>(b.size()));
    int ae = ad >= 0 ? a[static_cast<size_t>(ad)] : 1;
    int be = bd >= 0 ? b[static_cast<size_t>(bd)] : 1;
    if (ae != be && ae != 1 && be != 1)
      throw std::invalid_argument(std::string(op) + ": shapes " +
                                  shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcastable");
    out[static_cast<size_t>(d)] = std::max(ae, be);
  }
  return out;
}

// Odometer walk over `os`, calling f(offset_a, offset_b) in row-major order.
template <class F>
void for_each_broadcast(const Shape& os, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  const int R = static_cast<int>(os.size());
  const int64_t n = numel(os);
  if (R == 0) {
    if (n > 0) f(0, 0);
    return;
  }
  std::vector<int> idx(static_cast<size_t>(R), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(oa, ob);
    for (int d = R - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < os[du]) break;
      oa -= sa[du] * os[du];
      ob -= sb[du] * os[du];
      idx[du] = 0;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

const Shape& Tensor::shape() const {
  if (!valid()) throw std::runtime_error("Tensor: invalid handle");
  return graph_->node(*this).shape;
}

const std::vector<double>& Tensor::data() const {
  if (!valid()) throw std::runtime_error("Tensor: invalid handle");
  return graph_->node(*this).value;
}

double Tensor::scalar() const {
  const auto& v = data();
  if (v.size() != 1)
    throw std::invalid_argument("Tensor::scalar: tensor has " +
                                std::to_string(v.size()) + " elements");
  if (!std::isfinite(v[0]))
    throw std::runtime_error("Tensor::scalar: non-finite value");
  return v[0];
}

Array Tensor::to_array() const {
  graph_->check_finite(*this, "Tensor::to_array");
  return Array(shape(), data());
}

Tensor GradientMap::for_tensor(const Tensor& t) const {
  for (size_t i = 0; i < wrt.size(); ++i)
    if (wrt[i].id() == t.id()) return grads[i];
  throw std::invalid_argument("GradientMap: tensor was not requested");
}

// ---------------------------------------------------------------------------
// Graph basics
// ---------------------------------------------------------------------------

void Graph::clear() {
  nodes_.clear();
  ++generation_;
}

const Graph::Node& Graph::node(const Tensor& t) const {
  if (t.graph_ != this) throw std::runtime_error("Tensor belongs to another graph");
  if (t.gen_ != generation_)
    throw std::runtime_error("Tensor handle outlived Graph::clear()");
  return nodes_[static_cast<size_t>(t.id_)];
}

void Graph::require_same_graph(const Tensor& t, const char* op) const {
  if (!t.valid())
    throw std::invalid_argument(std::string(op) + ": invalid tensor");
  if (t.graph_ != this || t.gen_ != generation_)
    throw std::invalid_argument(std::string(op) +
                                ": tensor is not a live node of this graph");
}

Tensor Graph::wrap(int id) const {
  return Tensor(const_cast<Graph*>(this), id, generation_);
}

Tensor Graph::make(Op op, Shape shape, std::vector<double> value,
                   std::array<int, 2> parents, uint8_t nparent, double sval,
                   std::vector<int> attrs) {
  Node n;
  n.op = op;
  n.nparent = nparent;
  n.parent = parents;
  n.sval = sval;
  n.attrs = std::move(attrs);
  n.shape = std::move(shape);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return wrap(static_cast<int>(nodes_.size()) - 1);
}

Tensor Graph::leaf(const Array& v) {
  return make(Op::Leaf, v.shape, v.data, {{-1, -1}}, 0);
}

Tensor Graph::leaf(Shape shape, std::vector<double> data) {
  if (numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("leaf: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  return make(Op::Leaf, std::move(shape), std::move(data), {{-1, -1}}, 0);
}

Tensor Graph::scalar_leaf(double v) { return make(Op::Leaf, {}, {v}, {{-1, -1}}, 0); }

Tensor Graph::full(Shape shape, double v) {
  std::vector<double> d(static_cast<size_t>(numel(shape)), v);
  return make(Op::Leaf, std::move(shape), std::move(d), {{-1, -1}}, 0);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {
template <class F>
std::vector<double> map1(const std::vector<double>& a, F&& f) {
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}
}  // namespace

#define FEDLEAK_BINARY_OP(NAME, OPTAG, EXPR)                                  \
  Tensor Graph::NAME(Tensor a, Tensor b) {                                    \
    require_same_graph(a, #NAME);                                             \
    require_same_graph(b, #NAME);                                             \
    const Node& na = node(a);                                                 \
    const Node& nb = node(b);                                                 \
    if (na.shape == nb.shape) {                                               \
      std::vector<double> out(na.value.size());                               \
      for (size_t i = 0; i < out.size(); ++i) {                               \
        const double x = na.value[i], y = nb.value[i];                        \
        out[i] = (EXPR);                                                      \
      }                                                                       \
      return make(Op::OPTAG, na.shape, std::move(out),                        \
                  {{a.id(), b.id()}}, 2);                                     \
    }                                                                         \
    Shape os = broadcast_shape(na.shape, nb.shape, #NAME);                    \
    auto sa = aligned_strides(na.shape, os);                                  \
    auto sb = aligned_strides(nb.shape, os);                                  \
    std::vector<double> out;                                                  \
    out.reserve(static_cast<size_t>(numel(os)));                              \
    for_each_broadcast(os, sa, sb, [&](int64_t ia, int64_t ib) {              \
      const double x = na.value[static_cast<size_t>(ia)];                     \
      const double y = nb.value[static_cast<size_t>(ib)];                     \
      out.push_back(EXPR);                                                    \
    });                                                                       \
    return make(Op::OPTAG, std::move(os), std::move(out),                     \
                {{a.id(), b.id()}}, 2);                                       \
  }

FEDLEAK_BINARY_OP(add, Add, x + y)
FEDLEAK_BINARY_OP(sub, Sub, x - y)
FEDLEAK_BINARY_OP(mul, Mul, x * y)
FEDLEAK_BINARY_OP(div, Div, x / y)
#undef FEDLEAK_BINARY_OP

#define FEDLEAK_UNARY_OP(NAME, OPTAG, EXPR)                            \
  Tensor Graph::NAME(Tensor a) {                                       \
    require_same_graph(a, #NAME);                                      \
    const Node& na = node(a);                                          \
    auto out = map1(na.value, [](double x) { return (EXPR); });        \
    return make(Op::OPTAG, na.shape, std::move(out), {{a.id(), -1}}, 1); \
  }

FEDLEAK_UNARY_OP(neg, Neg, -x)
FEDLEAK_UNARY_OP(abs, Abs, std::abs(x))
FEDLEAK_UNARY_OP(sqrt, Sqrt, std::sqrt(x))
FEDLEAK_UNARY_OP(exp, Exp, std::exp(x))
FEDLEAK_UNARY_OP(log, Log, std::log(x))
FEDLEAK_UNARY_OP(relu, Relu, x > 0.0 ? x : 0.0)
FEDLEAK_UNARY_OP(sign, Sign, x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0))
FEDLEAK_UNARY_OP(step_mask, StepMask, x > 0.0 ? 1.0 : 0.0)
#undef FEDLEAK_UNARY_OP

Tensor Graph::add_scalar(Tensor a, double c) {
  require_same_graph(a, "add_scalar");
  const Node& na = node(a);
  auto out = map1(na.value, [c](double x) { return x + c; });
  return make(Op::AddS, na.shape, std::move(out), {{a.id(), -1}}, 1, c);
}

Tensor Graph::mul_scalar(Tensor a, double c) {
  require_same_graph(a, "mul_scalar");
  const Node& na = node(a);
  auto out = map1(na.value, [c](double x) { return x * c; });
  return make(Op::MulS, na.shape, std::move(out), {{a.id(), -1}}, 1, c);
}

// ---------------------------------------------------------------------------
// Linear algebra / structure
// ---------------------------------------------------------------------------

Tensor Graph::matmul(Tensor a, Tensor b) {
  require_same_graph(a, "matmul");
  require_same_graph(b, "matmul");
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(na.shape) + " x " + shape_str(nb.shape));
  const int M = na.shape[0], K = na.shape[1], N = nb.shape[1];
  std::vector<double> out(static_cast<size_t>(M) * static_cast<size_t>(N), 0.0);
  for (int m = 0; m < M; ++m) {
    const double* arow = na.value.data() + static_cast<size_t>(m) * K;
    double* orow = out.data() + static_cast<size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const double amk = arow[k];
      const double* brow = nb.value.data() + static_cast<size_t>(k) * N;
      for (int n = 0; n < N; ++n) orow[n] += amk * brow[n];
    }
  }
  return make(Op::Matmul, {M, N}, std::move(out), {{a.id(), b.id()}}, 2);
}

Tensor Graph::transpose(Tensor a) {
  require_same_graph(a, "transpose");
  const Node& na = node(a);
  if (na.shape.size() != 2)
    throw std::invalid_argument("transpose: expected rank 2, got " +
                                shape_str(na.shape));
  const int R = na.shape[0], C = na.shape[1];
  std::vector<double> out(na.value.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<size_t>(c) * R + r] = na.value[static_cast<size_t>(r) * C + c];
  return make(Op::Transpose, {C, R}, std::move(out), {{a.id(), -1}}, 1);
}

Tensor Graph::reshape(Tensor a, Shape shape) {
  require_same_graph(a, "reshape");
  const Node& na = node(a);
  if (numel(shape) != numel(na.shape))
    throw std::invalid_argument("reshape: cannot reshape " + shape_str(na.shape) +
                                " to " + shape_str(shape));
  return make(Op::Reshape, std::move(shape), na.value, {{a.id(), -1}}, 1);
}

Tensor Graph::concat(Tensor a, Tensor b, int axis) {
  require_same_graph(a, "concat");
  require_same_graph(b, "concat");
  const Node& na = node(a);
  const Node& nb = node(b);
  const int R = static_cast<int>(na.shape.size());
  if (static_cast<int>(nb.shape.size()) != R || axis < 0 || axis >= R)
    throw std::invalid_argument("concat: incompatible ranks or axis for " +
                                shape_str(na.shape) + " and " + shape_str(nb.shape));
  for (int d = 0; d < R; ++d)
    if (d != axis && na.shape[static_cast<size_t>(d)] != nb.shape[static_cast<size_t>(d)])
      throw std::invalid_argument("concat: shapes " + shape_str(na.shape) + " and " +
                                  shape_str(nb.shape) + " differ off axis " +
                                  std::to_string(axis));
  Shape os = na.shape;
  os[static_cast<size_t>(axis)] += nb.shape[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= na.shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < R; ++d) inner *= na.shape[static_cast<size_t>(d)];
  const int64_t abloc = na.shape[static_cast<size_t>(axis)] * inner;
  const int64_t bbloc = nb.shape[static_cast<size_t>(axis)] * inner;
  std::vector<double> out(static_cast<size_t>(numel(os)));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(na.value.data() + o * abloc, abloc,
                out.data() + o * (abloc + bbloc));
    std::copy_n(nb.value.data() + o * bbloc, bbloc,
                out.data() + o * (abloc + bbloc) + abloc);
  }
  return make(Op::ConcatPair, std::move(os), std::move(out), {{a.id(), b.id()}},
              2, 0.0, {axis});
}

Tensor Graph::concat(const std::vector<Tensor>& ts, int axis) {
  if (ts.empty()) throw std::invalid_argument("concat: empty tensor list");
  Tensor acc = ts[0];
  for (size_t i = 1; i < ts.size(); ++i) acc = concat(acc, ts[i], axis);
  return acc;
}

Tensor Graph::slice(Tensor a, const std::vector<int>& starts, const Shape& sizes) {
  require_same_graph(a, "slice");
  const Node& na = node(a);
  const int R = static_cast<int>(na.shape.size());
  if (static_cast<int>(starts.size()) != R || static_cast<int>(sizes.size()) != R)
    throw std::invalid_argument("slice: starts/sizes rank mismatch for " +
                                shape_str(na.shape));
  for (int d = 0; d < R; ++d) {
    size_t du = static_cast<size_t>(d);
    if (starts[du] < 0 || sizes[du] < 0 || starts[du] + sizes[du] > na.shape[du])
      throw std::invalid_argument("slice: out of bounds on axis " +
                                  std::to_string(d) + " for " + shape_str(na.shape));
  }
  auto ist = row_major_strides(na.shape);
  std::vector<double> out(static_cast<size_t>(numel(sizes)));
  std::vector<int> idx(static_cast<size_t>(R), 0);
  int64_t base = 0;
  for (int d = 0; d < R; ++d) base += static_cast<int64_t>(starts[static_cast<size_t>(d)]) * ist[static_cast<size_t>(d)];
  const int64_t n = numel(sizes);
  int64_t src = base;
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = na.value[static_cast<size_t>(src)];
    for (int d = R - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      ++idx[du];
      src += ist[du];
      if (idx[du] < sizes[du]) break;
      src -= ist[du] * sizes[du];
      idx[du] = 0;
    }
  }
  return make(Op::Slice, sizes, std::move(out), {{a.id(), -1}}, 1, 0.0, starts);
}

Tensor Graph::pad_to(Tensor a, const Shape& target, const std::vector<int>& offsets) {
  require_same_graph(a, "pad_to");
  const Node& na = node(a);
  const int R = static_cast<int>(na.shape.size());
  if (static_cast<int>(target.size()) != R || static_cast<int>(offsets.size()) != R)
    throw std::invalid_argument("pad_to: rank mismatch for " + shape_str(na.shape));
  for (int d = 0; d < R; ++d) {
    size_t du = static_cast<size_t>(d);
    if (offsets[du] < 0 || offsets[du] + na.shape[du] > target[du])
      throw std::invalid_argument("pad_to: region out of bounds on axis " +
                                  std::to_string(d));
  }
  auto ost = row_major_strides(target);
  std::vector<double> out(static_cast<size_t>(numel(target)), 0.0);
  std::vector<int> idx(static_cast<size_t>(R), 0);
  int64_t dst = 0;
  for (int d = 0; d < R; ++d) dst += static_cast<int64_t>(offsets[static_cast<size_t>(d)]) * ost[static_cast<size_t>(d)];
  const int64_t n = numel(na.shape);
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(dst)] = na.value[static_cast<size_t>(i)];
    for (int d = R - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      ++idx[du];
      dst += ost[du];
      if (idx[du] < na.shape[du]) break;
      dst -= ost[du] * na.shape[du];
      idx[du] = 0;
    }
  }
  return make(Op::PadTo, target, std::move(out), {{a.id(), -1}}, 1, 0.0, offsets);
}

// ---------------------------------------------------------------------------
// Reductions / broadcast
// ---------------------------------------------------------------------------

Tensor Graph::sum_all(Tensor a) {
  require_same_graph(a, "sum_all");
  const Node& na = node(a);
  ExactSum acc;
  for (double v : na.value) acc.add(v);
  return make(Op::SumAll, {}, {acc.result()}, {{a.id(), -1}}, 1);
}

Tensor Graph::mean_all(Tensor a) {
  const int64_t n = numel(node(a).shape);
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(n));
}

Tensor Graph::sum_to_shape(Tensor a, Shape shape) {
  require_same_graph(a, "sum_to_shape");
  const Node& na = node(a);
  if (na.shape == shape) return a;
  if (!broadcastable(shape, na.shape))
    throw std::invalid_argument("sum_to_shape: " + shape_str(shape) +
                                " does not broadcast to " + shape_str(na.shape));
  // Accumulate source elements into the right-aligned target cell; the
  // exact per-cell sums make the reduction independent of summand order.
  auto tstrides = aligned_strides(shape, na.shape);
  std::vector<ExactSum> cells(static_cast<size_t>(numel(shape)));
  const int R = static_cast<int>(na.shape.size());
  std::vector<int> idx(static_cast<size_t>(R), 0);
  int64_t dst = 0;
  const int64_t n = numel(na.shape);
  for (int64_t i = 0; i < n; ++i) {
    cells[static_cast<size_t>(dst)].add(na.value[static_cast<size_t>(i)]);
    for (int d = R - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      ++idx[du];
      dst += tstrides[du];
      if (idx[du] < na.shape[du]) break;
      dst -= tstrides[du] * na.shape[du];
      idx[du] = 0;
    }
  }
  std::vector<double> out(cells.size());
  for (size_t i = 0; i < cells.size(); ++i) out[i] = cells[i].result();
  return make(Op::SumToShape, std::move(shape), std::move(out), {{a.id(), -1}}, 1);
}

Tensor Graph::sum_axis(Tensor a, int axis) {
  const Shape& s = node(a).shape;
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("sum_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(s));
  Shape target = s;
  target[static_cast<size_t>(axis)] = 1;
  return sum_to_shape(a, target);
}

Tensor Graph::broadcast_to(Tensor a, Shape shape) {
  require_same_graph(a, "broadcast_to");
  const Node& na = node(a);
  if (na.shape == shape) return a;
  if (!broadcastable(na.shape, shape))
    throw std::invalid_argument("broadcast_to: " + shape_str(na.shape) +
                                " does not broadcast to " + shape_str(shape));
  auto sa = aligned_strides(na.shape, shape);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(numel(shape)));
  std::vector<int64_t> zero(shape.size(), 0);
  for_each_broadcast(shape, sa, zero, [&](int64_t ia, int64_t) {
    out.push_back(na.value[static_cast<size_t>(ia)]);
  });
  return make(Op::BroadcastTo, std::move(shape), std::move(out), {{a.id(), -1}}, 1);
}

Tensor Graph::max_axis(Tensor a, int axis) {
  require_same_graph(a, "max_axis");
  const Node& na = node(a);
  const int R = static_cast<int>(na.shape.size());
  if (axis < 0 || axis >= R)
    throw std::invalid_argument("max_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(na.shape));
  Shape os = na.shape;
  os[static_cast<size_t>(axis)] = 1;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= na.shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < R; ++d) inner *= na.shape[static_cast<size_t>(d)];
  const int64_t extent = na.shape[static_cast<size_t>(axis)];
  if (extent == 0) throw std::invalid_argument("max_axis: empty axis");
  std::vector<double> out(static_cast<size_t>(outer * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double best = na.value[static_cast<size_t>(o * extent * inner + i)];
      for (int64_t k = 1; k < extent; ++k) {
        double v = na.value[static_cast<size_t>((o * extent + k) * inner + i)];
        if (v > best) best = v;
      }
      out[static_cast<size_t>(o * inner + i)] = best;
    }
  return make(Op::MaxAxis, std::move(os), std::move(out), {{a.id(), -1}}, 1, 0.0,
              {axis});
}

Tensor Graph::argmax_mask_axis(Tensor a, int axis) {
  require_same_graph(a, "argmax_mask_axis");
  const Node& na = node(a);
  const int R = static_cast<int>(na.shape.size());
  if (axis < 0 || axis >= R)
    throw std::invalid_argument("argmax_mask_axis: axis out of range for " +
                                shape_str(na.shape));
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= na.shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < R; ++d) inner *= na.shape[static_cast<size_t>(d)];
  const int64_t extent = na.shape[static_cast<size_t>(axis)];
  std::vector<double> out(na.value.size(), 0.0);
  // ties route to the first maximal element
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      int64_t best_k = 0;
      double best = na.value[static_cast<size_t>(o * extent * inner + i)];
      for (int64_t k = 1; k < extent; ++k) {
        double v = na.value[static_cast<size_t>((o * extent + k) * inner + i)];
        if (v > best) {
          best = v;
          best_k = k;
        }
      }
      out[static_cast<size_t>((o * extent + best_k) * inner + i)] = 1.0;
    }
  return make(Op::ArgmaxMaskAxis, na.shape, std::move(out), {{a.id(), -1}}, 1,
              0.0, {axis});
}

Tensor Graph::max_all(Tensor a) {
  const int64_t n = numel(node(a).shape);
  if (n == 0) throw std::invalid_argument("max_all: empty tensor");
  return reshape(max_axis(reshape(a, {static_cast<int>(n)}), 0), {});
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

namespace {
void require_4d(const Shape& s, const char* op, const char* what) {
  if (s.size() != 4)
    throw std::invalid_argument(std::string(op) + ": " + what +
                                " must be rank 4, got " + shape_str(s));
}
}  // namespace

Tensor Graph::conv2d(Tensor x, Tensor w, int stride, int padding) {
  require_same_graph(x, "conv2d");
  require_same_graph(w, "conv2d");
  const Node& nx = node(x);
  const Node& nw = node(w);
  require_4d(nx.shape, "conv2d", "input");
  require_4d(nw.shape, "conv2d", "kernel");
  const int N = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
  const int O = nw.shape[0], KC = nw.shape[1], KH = nw.shape[2], KW = nw.shape[3];
  if (KC != C)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                " != kernel channels " + std::to_string(KC));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: invalid stride/padding");
  if (H + 2 * padding < KH || W + 2 * padding < KW)
    throw std::invalid_argument("conv2d: kernel " + shape_str(nw.shape) +
                                " larger than padded input " + shape_str(nx.shape));
  const int OH = (H + 2 * padding - KH) / stride + 1;
  const int OW = (W + 2 * padding - KW) / stride + 1;
  std::vector<double> out(static_cast<size_t>(N) * O * OH * OW, 0.0);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < KH; ++ky) {
              const int y = oy * stride - padding + ky;
              if (y < 0 || y >= H) continue;
              for (int kx = 0; kx < KW; ++kx) {
                const int xx = ox * stride - padding + kx;
                if (xx < 0 || xx >= W) continue;
                acc += nx.value[static_cast<size_t>(((n * C + c) * H + y) * W + xx)] *
                       nw.value[static_cast<size_t>(((o * KC + c) * KH + ky) * KW + kx)];
              }
            }
          out[static_cast<size_t>(((n * O + o) * OH + oy) * OW + ox)] = acc;
        }
  return make(Op::Conv2d, {N, O, OH, OW}, std::move(out), {{x.id(), w.id()}}, 2,
              0.0, {stride, padding});
}

Tensor Graph::conv2d_input_grad(Tensor g, Tensor w, int stride, int padding,
                                int in_h, int in_w) {
  require_same_graph(g, "conv2d_input_grad");
  require_same_graph(w, "conv2d_input_grad");
  const Node& ng = node(g);
  const Node& nw = node(w);
  require_4d(ng.shape, "conv2d_input_grad", "grad");
  require_4d(nw.shape, "conv2d_input_grad", "kernel");
  const int N = ng.shape[0], O = ng.shape[1], OH = ng.shape[2], OW = ng.shape[3];
  const int KO = nw.shape[0], C = nw.shape[1], KH = nw.shape[2], KW = nw.shape[3];
  if (KO != O)
    throw std::invalid_argument("conv2d_input_grad: channel mismatch");
  std::vector<double> out(static_cast<size_t>(N) * C * in_h * in_w, 0.0);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < in_h; ++y)
        for (int xx = 0; xx < in_w; ++xx) {
          double acc = 0.0;
          for (int o = 0; o < O; ++o)
            for (int ky = 0; ky < KH; ++ky) {
              const int ty = y + padding - ky;
              if (ty < 0 || ty % stride != 0) continue;
              const int oy = ty / stride;
              if (oy >= OH) continue;
              for (int kx = 0; kx < KW; ++kx) {
                const int tx = xx + padding - kx;
                if (tx < 0 || tx % stride != 0) continue;
                const int ox = tx / stride;
                if (ox >= OW) continue;
                acc += nw.value[static_cast<size_t>(((o * C + c) * KH + ky) * KW + kx)] *
                       ng.value[static_cast<size_t>(((n * O + o) * OH + oy) * OW + ox)];
              }
            }
          out[static_cast<size_t>(((n * C + c) * in_h + y) * in_w + xx)] = acc;
        }
  return make(Op::Conv2dInputGrad, {N, C, in_h, in_w}, std::move(out),
              {{g.id(), w.id()}}, 2, 0.0, {stride, padding});
}

Tensor Graph::conv2d_kernel_grad(Tensor x, Tensor g, int stride, int padding,
                                 int kernel_h, int kernel_w) {
  require_same_graph(x, "conv2d_kernel_grad");
  require_same_graph(g, "conv2d_kernel_grad");
  const Node& nx = node(x);
  const Node& ng = node(g);
  require_4d(nx.shape, "conv2d_kernel_grad", "input");
  require_4d(ng.shape, "conv2d_kernel_grad", "grad");
  const int N = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
  const int GN = ng.shape[0], O = ng.shape[1], OH = ng.shape[2], OW = ng.shape[3];
  if (GN != N)
    throw std::invalid_argument("conv2d_kernel_grad: batch mismatch");
  std::vector<double> out(static_cast<size_t>(O) * C * kernel_h * kernel_w, 0.0);
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < kernel_h; ++ky)
        for (int kx = 0; kx < kernel_w; ++kx) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n)
            for (int oy = 0; oy < OH; ++oy) {
              const int y = oy * stride - padding + ky;
              if (y < 0 || y >= H) continue;
              for (int ox = 0; ox < OW; ++ox) {
                const int xx = ox * stride - padding + kx;
                if (xx < 0 || xx >= W) continue;
                acc += nx.value[static_cast<size_t>(((n * C + c) * H + y) * W + xx)] *
                       ng.value[static_cast<size_t>(((n * O + o) * OH + oy) * OW + ox)];
              }
            }
          out[static_cast<size_t>(((o * C + c) * kernel_h + ky) * kernel_w + kx)] = acc;
        }
  return make(Op::Conv2dKernelGrad, {O, C, kernel_h, kernel_w}, std::move(out),
              {{x.id(), g.id()}}, 2, 0.0, {stride, padding});
}

Tensor Graph::avgpool2d(Tensor x, int kernel, int stride) {
  require_same_graph(x, "avgpool2d");
  const Node& nx = node(x);
  require_4d(nx.shape, "avgpool2d", "input");
  if (kernel < 1 || stride < 1)
    throw std::invalid_argument("avgpool2d: invalid kernel/stride");
  const int N = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
  if (H < kernel || W < kernel)
    throw std::invalid_argument("avgpool2d: kernel " + std::to_string(kernel) +
                                " larger than input " + shape_str(nx.shape));
  const int OH = (H - kernel) / stride + 1;
  const int OW = (W - kernel) / stride + 1;
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  std::vector<double> out(static_cast<size_t>(N) * C * OH * OW);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              acc += nx.value[static_cast<size_t>(
                  ((n * C + c) * H + oy * stride + ky) * W + ox * stride + kx)];
          out[static_cast<size_t>(((n * C + c) * OH + oy) * OW + ox)] = acc * inv;
        }
  return make(Op::AvgPool2d, {N, C, OH, OW}, std::move(out), {{x.id(), -1}}, 1,
              0.0, {kernel, stride});
}

Tensor Graph::avgpool2d_grad(Tensor g, int kernel, int stride, int in_h, int in_w) {
  require_same_graph(g, "avgpool2d_grad");
  const Node& ng = node(g);
  require_4d(ng.shape, "avgpool2d_grad", "grad");
  const int N = ng.shape[0], C = ng.shape[1], OH = ng.shape[2], OW = ng.shape[3];
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  std::vector<double> out(static_cast<size_t>(N) * C * in_h * in_w, 0.0);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < in_h; ++y)
        for (int xx = 0; xx < in_w; ++xx) {
          double acc = 0.0;
          for (int ky = 0; ky < kernel; ++ky) {
            const int ty = y - ky;
            if (ty < 0 || ty % stride != 0) continue;
            const int oy = ty / stride;
            if (oy >= OH) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int tx = xx - kx;
              if (tx < 0 || tx % stride != 0) continue;
              const int ox = tx / stride;
              if (ox >= OW) continue;
              acc += ng.value[static_cast<size_t>(((n * C + c) * OH + oy) * OW + ox)];
            }
          }
          out[static_cast<size_t>(((n * C + c) * in_h + y) * in_w + xx)] = acc * inv;
        }
  return make(Op::AvgPool2dGrad, {N, C, in_h, in_w}, std::move(out),
              {{g.id(), -1}}, 1, 0.0, {kernel, stride});
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

Tensor Graph::softmax(Tensor logits) {
  const Shape& s = node(logits).shape;
  if (s.size() != 2)
    throw std::invalid_argument("softmax: expected rank 2 logits, got " +
                                shape_str(s));
  Tensor shifted = sub(logits, max_axis(logits, 1));
  Tensor e = exp(shifted);
  return div(e, sum_axis(e, 1));
}

Tensor Graph::cross_entropy_with_softmax(Tensor logits,
                                         const std::vector<int>& labels) {
  const Shape& s = node(logits).shape;
  if (s.size() != 2)
    throw std::invalid_argument("cross_entropy_with_softmax: expected rank 2 "
                                "logits, got " + shape_str(s));
  const int N = s[0], K = s[1];
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("cross_entropy_with_softmax: " +
                                std::to_string(labels.size()) + " labels for " +
                                std::to_string(N) + " rows");
  Array onehot({N, K});
  for (int i = 0; i < N; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= K)
      throw std::invalid_argument("cross_entropy_with_softmax: label " +
                                  std::to_string(y) + " out of range [0," +
                                  std::to_string(K) + ")");
    onehot.data[static_cast<size_t>(i) * K + y] = 1.0;
  }
  // log-sum-exp with max shift; the shift contributes zero gradient
  Tensor m = max_axis(logits, 1);
  Tensor lse = add(log(sum_axis(exp(sub(logits, m)), 1)), m);
  Tensor picked = sum_axis(mul(logits, leaf(onehot)), 1);
  return mul_scalar(sum_all(sub(lse, picked)), 1.0 / static_cast<double>(N));
}

Tensor Graph::dot(Tensor a, Tensor b) {
  if (node(a).shape != node(b).shape)
    throw std::invalid_argument("dot: shapes " + shape_str(node(a).shape) +
                                " and " + shape_str(node(b).shape) + " differ");
  return sum_all(mul(a, b));
}

Tensor Graph::l2_norm(Tensor a) { return sqrt(sum_all(mul(a, a))); }

Tensor Graph::cosine_similarity(Tensor a, Tensor b) {
  Tensor na = l2_norm(a);
  Tensor nb = l2_norm(b);
  if (na.scalar() == 0.0 || nb.scalar() == 0.0) return scalar_leaf(0.0);
  return div(dot(a, b), mul(na, nb));
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

void Graph::accumulate(int target, Tensor contrib, std::vector<int>& adjoint) {
  int& slot = adjoint[static_cast<size_t>(target)];
  if (slot < 0)
    slot = contrib.id();
  else
    slot = add(wrap(slot), contrib).id();
}

void Graph::emit_backward(int id, Tensor adj, std::vector<int>& adjoint,
                          const std::vector<uint8_t>& live) {
  // node() references may dangle across make() calls; copy what we need.
  const Op op = nodes_[static_cast<size_t>(id)].op;
  const int pa = nodes_[static_cast<size_t>(id)].parent[0];
  const int pb = nodes_[static_cast<size_t>(id)].parent[1];
  const uint8_t np = nodes_[static_cast<size_t>(id)].nparent;
  const double sval = nodes_[static_cast<size_t>(id)].sval;
  const std::vector<int> attrs = nodes_[static_cast<size_t>(id)].attrs;
  if (np == 0) return;
  const bool la = live[static_cast<size_t>(pa)] != 0;
  const bool lb = np > 1 && live[static_cast<size_t>(pb)] != 0;
  if (!la && !lb) return;
  const Shape sa = nodes_[static_cast<size_t>(pa)].shape;
  const Shape sb = np > 1 ? nodes_[static_cast<size_t>(pb)].shape : Shape{};
  Tensor a = wrap(pa);
  Tensor b = np > 1 ? wrap(pb) : Tensor();
  Tensor self = wrap(id);

  switch (op) {
    case Op::Leaf:
      break;
    case Op::Add:
      if (la) accumulate(pa, sum_to_shape(adj, sa), adjoint);
      if (lb) accumulate(pb, sum_to_shape(adj, sb), adjoint);
      break;
    case Op::Sub:
      if (la) accumulate(pa, sum_to_shape(adj, sa), adjoint);
      if (lb) accumulate(pb, sum_to_shape(neg(adj), sb), adjoint);
      break;
    case Op::Mul:
      if (la) accumulate(pa, sum_to_shape(mul(adj, b), sa), adjoint);
      if (lb) accumulate(pb, sum_to_shape(mul(adj, a), sb), adjoint);
      break;
    case Op::Div:
      if (la) accumulate(pa, sum_to_shape(div(adj, b), sa), adjoint);
      if (lb)
        accumulate(pb, sum_to_shape(neg(div(mul(adj, a), mul(b, b))), sb),
                   adjoint);
      break;
    case Op::Neg:
      if (la) accumulate(pa, neg(adj), adjoint);
      break;
    case Op::AddS:
      if (la) accumulate(pa, adj, adjoint);
      break;
    case Op::MulS:
      if (la) accumulate(pa, mul_scalar(adj, sval), adjoint);
      break;
    case Op::Abs:
      if (la) accumulate(pa, mul(adj, sign(a)), adjoint);
      break;
    case Op::Sqrt:
      if (la) accumulate(pa, div(mul_scalar(adj, 0.5), self), adjoint);
      break;
    case Op::Exp:
      if (la) accumulate(pa, mul(adj, self), adjoint);
      break;
    case Op::Log:
      if (la) accumulate(pa, div(adj, a), adjoint);
      break;
    case Op::Relu:
      if (la) accumulate(pa, mul(adj, step_mask(a)), adjoint);
      break;
    case Op::Sign:
    case Op::StepMask:
    case Op::ArgmaxMaskAxis:
      break;  // piecewise-constant: zero derivative
    case Op::Matmul:
      if (la) accumulate(pa, matmul(adj, transpose(b)), adjoint);
      if (lb) accumulate(pb, matmul(transpose(a), adj), adjoint);
      break;
    case Op::Transpose:
      if (la) accumulate(pa, transpose(adj), adjoint);
      break;
    case Op::Reshape:
      if (la) accumulate(pa, reshape(adj, sa), adjoint);
      break;
    case Op::ConcatPair: {
      const int axis = attrs[0];
      if (la) {
        std::vector<int> starts(sa.size(), 0);
        accumulate(pa, slice(adj, starts, sa), adjoint);
      }
      if (lb) {
        std::vector<int> starts(sb.size(), 0);
        starts[static_cast<size_t>(axis)] = sa[static_cast<size_t>(axis)];
        accumulate(pb, slice(adj, starts, sb), adjoint);
      }
      break;
    }
    case Op::Slice:
      if (la) accumulate(pa, pad_to(adj, sa, attrs), adjoint);
      break;
    case Op::PadTo:
      if (la) accumulate(pa, slice(adj, attrs, sa), adjoint);
      break;
    case Op::SumAll:
    case Op::SumToShape:
      if (la) accumulate(pa, broadcast_to(adj, sa), adjoint);
      break;
    case Op::BroadcastTo:
      if (la) accumulate(pa, sum_to_shape(adj, sa), adjoint);
      break;
    case Op::MaxAxis:
      if (la)
        accumulate(pa, mul(broadcast_to(adj, sa), argmax_mask_axis(a, attrs[0])),
                   adjoint);
      break;
    case Op::Conv2d: {
      const int stride = attrs[0], pad = attrs[1];
      if (la)
        accumulate(pa, conv2d_input_grad(adj, b, stride, pad, sa[2], sa[3]),
                   adjoint);
      if (lb)
        accumulate(pb, conv2d_kernel_grad(a, adj, stride, pad, sb[2], sb[3]),
                   adjoint);
      break;
    }
    case Op::Conv2dInputGrad: {
      // self = adjoint-of-conv map applied to g (parent a), kernel b
      const int stride = attrs[0], pad = attrs[1];
      if (la) accumulate(pa, conv2d(adj, b, stride, pad), adjoint);
      if (lb)
        accumulate(pb, conv2d_kernel_grad(adj, a, stride, pad, sb[2], sb[3]),
                   adjoint);
      break;
    }
    case Op::Conv2dKernelGrad: {
      // self = kernel-gradient map of input a and grad b; adj is kernel-shaped
      const int stride = attrs[0], pad = attrs[1];
      if (la)
        accumulate(pa, conv2d_input_grad(b, adj, stride, pad, sa[2], sa[3]),
                   adjoint);
      if (lb) accumulate(pb, conv2d(a, adj, stride, pad), adjoint);
      break;
    }
    case Op::AvgPool2d:
      if (la)
        accumulate(pa, avgpool2d_grad(adj, attrs[0], attrs[1], sa[2], sa[3]),
                   adjoint);
      break;
    case Op::AvgPool2dGrad:
      if (la) accumulate(pa, avgpool2d(adj, attrs[0], attrs[1]), adjoint);
      break;
  }
}

GradientMap Graph::grad(Tensor output, const std::vector<Tensor>& wrt) {
  require_same_graph(output, "grad");
  for (const Tensor& t : wrt) require_same_graph(t, "grad");
  if (numel(node(output).shape) != 1)
    throw std::invalid_argument("grad: output must be scalar, got shape " +
                                shape_str(node(output).shape));

  const int n = output.id();
  if (n < 0) throw std::invalid_argument("grad: invalid output tensor");
  std::vector<uint8_t> anc(static_cast<size_t>(n) + 1, 0);
  anc[static_cast<size_t>(n)] = 1;
  for (int i = n; i >= 0; --i) {
    if (!anc[static_cast<size_t>(i)]) continue;
    const Node& nd = nodes_[static_cast<size_t>(i)];
    for (uint8_t p = 0; p < nd.nparent; ++p)
      anc[static_cast<size_t>(nd.parent[p])] = 1;
  }
  std::vector<uint8_t> mark(static_cast<size_t>(n) + 1, 0);
  for (const Tensor& t : wrt)
    if (t.id() <= n) mark[static_cast<size_t>(t.id())] = 1;
  for (int i = 0; i <= n; ++i) {
    if (mark[static_cast<size_t>(i)]) continue;
    const Node& nd = nodes_[static_cast<size_t>(i)];
    for (uint8_t p = 0; p < nd.nparent; ++p)
      if (mark[static_cast<size_t>(nd.parent[p])]) {
        mark[static_cast<size_t>(i)] = 1;
        break;
      }
  }
  std::vector<uint8_t> live(static_cast<size_t>(n) + 1, 0);
  for (int i = 0; i <= n; ++i)
    live[static_cast<size_t>(i)] = anc[static_cast<size_t>(i)] && mark[static_cast<size_t>(i)];

  std::vector<int> adjoint(static_cast<size_t>(n) + 1, -1);
  if (live[static_cast<size_t>(n)])
    adjoint[static_cast<size_t>(n)] = full(node(output).shape, 1.0).id();
  for (int i = n; i >= 0; --i) {
    if (!live[static_cast<size_t>(i)] || adjoint[static_cast<size_t>(i)] < 0)
      continue;
    emit_backward(i, wrap(adjoint[static_cast<size_t>(i)]), adjoint, live);
  }

  GradientMap gm;
  gm.wrt = wrt;
  gm.grads.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    const int a = t.id() <= n ? adjoint[static_cast<size_t>(t.id())] : -1;
    if (a >= 0)
      gm.grads.push_back(wrap(a));
    else
      gm.grads.push_back(full(node(t).shape, 0.0));  // unreachable: zero grad
  }
  return gm;
}

void Graph::check_finite(Tensor t, const char* what) const {
  const auto& v = node(t).value;
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw std::runtime_error(std::string(what) +
                               ": non-finite value at flat index " +
                               std::to_string(i));
}

// ---------------------------------------------------------------------------
// Finite differences (test oracle)
// ---------------------------------------------------------------------------

Array finite_difference(const std::function<double(const Array&)>& fn,
                        const Array& at, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference: step must be positive");
  Array grad(at.shape, 0.0);
  Array probe = at;
  for (size_t i = 0; i < at.data.size(); ++i) {
    const double orig = at.data[i];
    probe.data[i] = orig + step;
    const double fp = fn(probe);
    probe.data[i] = orig - step;
    const double fm = fn(probe);
    probe.data[i] = orig;
    grad.data[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

}  // namespace fedleak
