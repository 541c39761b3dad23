#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedleak/tensor.hpp"

namespace fedleak {

enum class LayerKind { Conv2d, ReLU, AvgPool2d, Flatten, Linear };

struct LayerSpec {
  LayerKind kind;
  int in = 0;        // conv: in channels, linear: in features
  int out = 0;       // conv: out channels, linear: out features
  int kernel = 0;    // conv / avgpool
  int stride = 1;    // conv / avgpool
  int padding = 0;   // conv

  static LayerSpec conv2d(int in_ch, int out_ch, int kernel, int stride = 1,
                          int padding = 0);
  static LayerSpec relu();
  static LayerSpec avgpool2d(int kernel, int stride);
  static LayerSpec flatten();
  static LayerSpec linear(int in, int out);
};

/// Layer-structured model definition. The flatten size is derived from the
/// declared input shape, never hard-coded; the final layer must be linear
/// with out == num_classes.
struct Architecture {
  std::vector<LayerSpec> layers;
  int in_channels = 1;
  int in_h = 0;
  int in_w = 0;
  int num_classes = 0;

  /// Throws unless layer shapes chain consistently to a (num_classes,) head.
  void validate() const;
  int64_t param_count() const;
  Shape input_shape() const { return {in_channels, in_h, in_w}; }

  /// Shapes of the trainable tensors, in order (weight then bias per layer).
  std::vector<Shape> param_shapes() const;

  /// 2-conv / 2-linear grayscale-digit-style network (62 classes, 32x32x3).
  static Architecture femnist();
  /// Double-width variant for 100-class natural images (32x32x3).
  static Architecture cifar100();
  /// MLP over flattened inputs, one linear layer per entry of `hidden` plus
  /// the classification head, ReLU between.
  static Architecture mlp(int channels, int h, int w,
                          const std::vector<int>& hidden, int num_classes);
};

/// Trainable tensors of an Architecture, in declaration order (weight, then
/// bias, per parameterized layer). Linear weights are stored (in, out);
/// conv kernels (out, in, kh, kw). The flattened vector view concatenates
/// the tensors in this order, row-major.
struct Parameters {
  std::vector<Array> tensors;

  int64_t total_size() const;
  Array flatten() const;
  static Parameters unflatten(const Architecture& arch, const Array& flat);
};

/// Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero.
Parameters init_params(const Architecture& arch, uint64_t seed);

/// Parameter leaves inserted into a graph, parallel to Parameters::tensors.
struct GraphParams {
  std::vector<Tensor> tensors;
};

GraphParams insert_params(Graph& g, const Parameters& params);

struct ForwardTrace {
  Tensor logits;       // (N, K)
  Tensor probs;        // (N, K), rows sum to 1
  Tensor penultimate;  // input of the final linear layer, (N, n_{L-1})
  Tensor loss;         // mean cross-entropy; invalid if labels were omitted
};

/// Differentiable forward pass. `batch` is (N, C, H, W). When `labels` is
/// empty the CE loss is skipped and trace.loss is left invalid.
ForwardTrace forward(Graph& g, const Architecture& arch, const GraphParams& gp,
                     Tensor batch, const std::vector<int>& labels);

/// Per-class sums of dCE/dW over the final linear layer's weights: entry k
/// sums the weight-gradient column feeding logit k.
std::vector<double> last_layer_grad_sums(Graph& g, const ForwardTrace& trace,
                                         const GraphParams& gp);

}  // namespace fedleak
