#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace fedleak {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Detached n-dimensional value: shape plus row-major doubles. Used for data
/// at rest (datasets, parameters, saved tensors); enters a Graph as a leaf.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(Shape s, double fill = 0.0);
  Array(Shape s, std::vector<double> d);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
};

class Graph;

/// Handle to a node in a Graph. Cheap to copy. A default-constructed Tensor
/// is invalid; handles are invalidated when their Graph is cleared.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return graph_ != nullptr; }
  const Shape& shape() const;
  const std::vector<double>& data() const;
  double scalar() const;  // value of a single-element tensor; checks finiteness
  Array to_array() const;
  int id() const { return id_; }
  Graph* graph() const { return graph_; }

 private:
  friend class Graph;
  Tensor(Graph* g, int id, uint64_t gen) : graph_(g), id_(id), gen_(gen) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
  uint64_t gen_ = 0;
};

/// Gradients returned by Graph::grad, parallel to the `wrt` argument. Every
/// entry is itself a graph node built from differentiable primitives, so
/// grad may be applied again to expressions containing them.
struct GradientMap {
  std::vector<Tensor> wrt;
  std::vector<Tensor> grads;

  const Tensor& operator[](size_t i) const { return grads[i]; }
  size_t size() const { return grads.size(); }
  Tensor for_tensor(const Tensor& t) const;  // lookup by node id
};

/// Append-only computation graph over dense double-precision tensors.
///
/// Nodes are evaluated eagerly at construction and cached, so evaluation
/// order is fixed and identical graphs produce bit-identical outputs.
/// Derivative rules emit primitive ops rather than writing to a side tape;
/// the tensors returned by grad() are ordinary graph nodes and can be
/// differentiated again (the mechanism behind losses that contain gradients).
///
/// A Graph and its Tensors form a single-owner unit: do not share one graph
/// between concurrent executions. Independent Graphs may run in parallel.
///
/// Broadcasting for binary elementwise ops follows the right-aligned rule:
/// trailing dimensions must match or be 1 (missing dimensions count as 1).
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Drops all nodes and invalidates outstanding Tensor handles.
  void clear();
  size_t node_count() const { return nodes_.size(); }

  // ---- leaves ----
  Tensor leaf(const Array& v);
  Tensor leaf(Shape shape, std::vector<double> data);
  Tensor scalar_leaf(double v);
  Tensor full(Shape shape, double v);

  // ---- elementwise (broadcasting) ----
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor div(Tensor a, Tensor b);
  Tensor neg(Tensor a);
  Tensor add_scalar(Tensor a, double c);
  Tensor mul_scalar(Tensor a, double c);
  Tensor abs(Tensor a);
  Tensor sqrt(Tensor a);
  Tensor exp(Tensor a);
  Tensor log(Tensor a);
  Tensor relu(Tensor a);       // derivative at exactly 0 is 0
  Tensor sign(Tensor a);       // -1/0/+1, derivative 0
  Tensor step_mask(Tensor a);  // 1 where a > 0 else 0, derivative 0
  Tensor square(Tensor a) { return mul(a, a); }

  // ---- linear algebra / structure ----
  Tensor matmul(Tensor a, Tensor b);  // 2-D x 2-D
  Tensor transpose(Tensor a);         // 2-D
  Tensor reshape(Tensor a, Shape shape);
  Tensor concat(Tensor a, Tensor b, int axis);
  Tensor concat(const std::vector<Tensor>& ts, int axis);
  Tensor slice(Tensor a, const std::vector<int>& starts, const Shape& sizes);
  /// Embeds `a` into zeros of shape `target` at `offsets` (adjoint of slice).
  Tensor pad_to(Tensor a, const Shape& target, const std::vector<int>& offsets);

  // ---- reductions / broadcast ----
  Tensor sum_all(Tensor a);   // rank-0
  Tensor mean_all(Tensor a);  // rank-0
  Tensor sum_axis(Tensor a, int axis);  // keeps the axis with extent 1
  Tensor sum_to_shape(Tensor a, Shape shape);
  Tensor broadcast_to(Tensor a, Shape shape);
  Tensor max_all(Tensor a);             // rank-0; ties route to first maximum
  Tensor max_axis(Tensor a, int axis);  // keeps the axis with extent 1
  /// 1.0 at the first maximal element along `axis`, else 0. Derivative 0.
  Tensor argmax_mask_axis(Tensor a, int axis);

  // ---- convolution / pooling (NCHW, kernel OIHW) ----
  /// Output spatial extent: (H + 2*padding - KH) / stride + 1 (exact floor).
  Tensor conv2d(Tensor x, Tensor w, int stride, int padding);
  Tensor conv2d_input_grad(Tensor g, Tensor w, int stride, int padding,
                           int in_h, int in_w);
  Tensor conv2d_kernel_grad(Tensor x, Tensor g, int stride, int padding,
                            int kernel_h, int kernel_w);
  /// No padding; trailing cells that do not fill a window are dropped.
  /// Output spatial extent: (H - kernel) / stride + 1.
  Tensor avgpool2d(Tensor x, int kernel, int stride);
  Tensor avgpool2d_grad(Tensor g, int kernel, int stride, int in_h, int in_w);

  // ---- composites ----
  Tensor softmax(Tensor logits);  // (N, K), rows sum to 1
  /// Mean over the batch of -log softmax(logits)[i, labels[i]].
  Tensor cross_entropy_with_softmax(Tensor logits,
                                    const std::vector<int>& labels);
  Tensor dot(Tensor a, Tensor b);  // same shape, sum of products
  Tensor l2_norm(Tensor a);
  /// dot(a,b)/(|a||b|); 0 when either norm is exactly zero (documented).
  Tensor cosine_similarity(Tensor a, Tensor b);

  // ---- differentiation ----
  /// Reverse-mode gradient of a scalar output w.r.t. the given nodes.
  /// Unreachable wrt entries receive zero tensors (not an error).
  GradientMap grad(Tensor output, const std::vector<Tensor>& wrt);

  /// Throws if any value in `t` is NaN or infinite.
  void check_finite(Tensor t, const char* what = "tensor") const;

 private:
  enum class Op : uint8_t {
    Leaf, Add, Sub, Mul, Div, Neg, AddS, MulS,
    Abs, Sqrt, Exp, Log, Relu, Sign, StepMask,
    Matmul, Transpose, Reshape, ConcatPair, Slice, PadTo,
    SumAll, SumToShape, BroadcastTo, MaxAxis, ArgmaxMaskAxis,
    Conv2d, Conv2dInputGrad, Conv2dKernelGrad, AvgPool2d, AvgPool2dGrad,
  };

  struct Node {
    Op op;
    uint8_t nparent = 0;
    std::array<int, 2> parent{{-1, -1}};
    double sval = 0.0;        // scalar attribute (AddS/MulS)
    std::vector<int> attrs;   // op-specific ints (axis, starts, conv params)
    Shape shape;
    std::vector<double> value;
  };

  Tensor make(Op op, Shape shape, std::vector<double> value,
              std::array<int, 2> parents, uint8_t nparent,
              double sval = 0.0, std::vector<int> attrs = {});
  const Node& node(const Tensor& t) const;
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  void require_same_graph(const Tensor& t, const char* op) const;
  Tensor wrap(int id) const;

  // backward rule: accumulates parent adjoint contributions
  void emit_backward(int id, Tensor adj, std::vector<int>& adjoint,
                     const std::vector<uint8_t>& live);
  void accumulate(int target, Tensor contrib, std::vector<int>& adjoint);

  std::vector<Node> nodes_;
  uint64_t generation_ = 0;

  friend class Tensor;
};

/// Central-difference gradient estimate of a scalar-valued function,
/// same shape as `at`. Test oracle; independent of Graph::grad.
Array finite_difference(const std::function<double(const Array&)>& fn,
                        const Array& at, double step);

}  // namespace fedleak
