#include "fedleak/model.hpp"

#include <cmath>
#include <stdexcept>

#include "fedleak/random.hpp"

namespace fedleak {

LayerSpec LayerSpec::conv2d(int in_ch, int out_ch, int kernel, int stride,
                            int padding) {
  LayerSpec s;
  s.kind = LayerKind::Conv2d;
  s.in = in_ch;
  s.out = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::ReLU;
  return s;
}

LayerSpec LayerSpec::avgpool2d(int kernel, int stride) {
  LayerSpec s;
  s.kind = LayerKind::AvgPool2d;
  s.kernel = kernel;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::Flatten;
  return s;
}

LayerSpec LayerSpec::linear(int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::Linear;
  s.in = in;
  s.out = out;
  return s;
}

namespace {

struct ShapeCursor {
  bool spatial;  // before flatten: (c, h, w); after: features
  int c = 0, h = 0, w = 0;
  int features = 0;
};

ShapeCursor chain_shapes(const Architecture& arch, size_t upto) {
  ShapeCursor cur;
  cur.spatial = true;
  cur.c = arch.in_channels;
  cur.h = arch.in_h;
  cur.w = arch.in_w;
  for (size_t i = 0; i < upto; ++i) {
    const LayerSpec& l = arch.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d: {
        if (!cur.spatial)
          throw std::invalid_argument("architecture: conv2d after flatten");
        if (l.in != cur.c)
          throw std::invalid_argument(
              "architecture: conv2d layer " + std::to_string(i) + " expects " +
              std::to_string(l.in) + " channels, input has " +
              std::to_string(cur.c));
        cur.c = l.out;
        cur.h = (cur.h + 2 * l.padding - l.kernel) / l.stride + 1;
        cur.w = (cur.w + 2 * l.padding - l.kernel) / l.stride + 1;
        if (cur.h < 1 || cur.w < 1)
          throw std::invalid_argument("architecture: conv2d layer " +
                                      std::to_string(i) + " collapses input");
        break;
      }
      case LayerKind::ReLU:
        break;
      case LayerKind::AvgPool2d: {
        if (!cur.spatial)
          throw std::invalid_argument("architecture: avgpool2d after flatten");
        cur.h = (cur.h - l.kernel) / l.stride + 1;
        cur.w = (cur.w - l.kernel) / l.stride + 1;
        if (cur.h < 1 || cur.w < 1)
          throw std::invalid_argument("architecture: avgpool2d layer " +
                                      std::to_string(i) + " collapses input");
        break;
      }
      case LayerKind::Flatten:
        if (!cur.spatial)
          throw std::invalid_argument("architecture: repeated flatten");
        cur.spatial = false;
        cur.features = cur.c * cur.h * cur.w;
        break;
      case LayerKind::Linear: {
        if (cur.spatial) {
          // implicit flatten allowed for MLPs over image inputs
          cur.spatial = false;
          cur.features = cur.c * cur.h * cur.w;
        }
        if (l.in != cur.features)
          throw std::invalid_argument(
              "architecture: linear layer " + std::to_string(i) + " expects " +
              std::to_string(l.in) + " features, input has " +
              std::to_string(cur.features));
        cur.features = l.out;
        break;
      }
    }
  }
  return cur;
}

}  // namespace

void Architecture::validate() const {
  if (layers.empty()) throw std::invalid_argument("architecture: no layers");
  if (in_channels < 1 || in_h < 1 || in_w < 1 || num_classes < 1)
    throw std::invalid_argument("architecture: bad input shape or class count");
  ShapeCursor end = chain_shapes(*this, layers.size());
  if (layers.back().kind != LayerKind::Linear)
    throw std::invalid_argument("architecture: final layer must be linear");
  if (end.spatial || end.features != num_classes)
    throw std::invalid_argument(
        "architecture: final linear output " +
        std::to_string(end.spatial ? -1 : end.features) +
        " != class count " + std::to_string(num_classes));
}

std::vector<Shape> Architecture::param_shapes() const {
  std::vector<Shape> shapes;
  for (const LayerSpec& l : layers) {
    if (l.kind == LayerKind::Conv2d) {
      shapes.push_back({l.out, l.in, l.kernel, l.kernel});
      shapes.push_back({l.out});
    } else if (l.kind == LayerKind::Linear) {
      shapes.push_back({l.in, l.out});
      shapes.push_back({l.out});
    }
  }
  return shapes;
}

int64_t Architecture::param_count() const {
  int64_t n = 0;
  for (const Shape& s : param_shapes()) n += numel(s);
  return n;
}

Architecture Architecture::femnist() {
  Architecture a;
  a.in_channels = 3;
  a.in_h = 32;
  a.in_w = 32;
  a.num_classes = 62;
  a.layers = {
      LayerSpec::conv2d(3, 32, 3, 1, 1),
      LayerSpec::relu(),
      LayerSpec::avgpool2d(2, 2),
      LayerSpec::conv2d(32, 64, 1, 1, 1),
      LayerSpec::relu(),
      LayerSpec::avgpool2d(2, 2),
      LayerSpec::flatten(),
      LayerSpec::linear(64 * 9 * 9, 100),
      LayerSpec::relu(),
      LayerSpec::linear(100, 62),
  };
  a.validate();
  return a;
}

Architecture Architecture::cifar100() {
  Architecture a;
  a.in_channels = 3;
  a.in_h = 32;
  a.in_w = 32;
  a.num_classes = 100;
  a.layers = {
      LayerSpec::conv2d(3, 64, 3, 1, 1),
      LayerSpec::relu(),
      LayerSpec::avgpool2d(2, 2),
      LayerSpec::conv2d(64, 128, 1, 1, 1),
      LayerSpec::relu(),
      LayerSpec::avgpool2d(2, 2),
      LayerSpec::flatten(),
      LayerSpec::linear(128 * 9 * 9, 200),
      LayerSpec::relu(),
      LayerSpec::linear(200, 100),
  };
  a.validate();
  return a;
}

Architecture Architecture::mlp(int channels, int h, int w,
                               const std::vector<int>& hidden,
                               int num_classes) {
  Architecture a;
  a.in_channels = channels;
  a.in_h = h;
  a.in_w = w;
  a.num_classes = num_classes;
  a.layers.push_back(LayerSpec::flatten());
  int in = channels * h * w;
  for (int width : hidden) {
    a.layers.push_back(LayerSpec::linear(in, width));
    a.layers.push_back(LayerSpec::relu());
    in = width;
  }
  a.layers.push_back(LayerSpec::linear(in, num_classes));
  a.validate();
  return a;
}

int64_t Parameters::total_size() const {
  int64_t n = 0;
  for (const Array& t : tensors) n += t.size();
  return n;
}

Array Parameters::flatten() const {
  Array flat(Shape{static_cast<int>(total_size())});
  int64_t off = 0;
  for (const Array& t : tensors) {
    std::copy(t.data.begin(), t.data.end(),
              flat.data.begin() + static_cast<ptrdiff_t>(off));
    off += t.size();
  }
  return flat;
}

Parameters Parameters::unflatten(const Architecture& arch, const Array& flat) {
  Parameters p;
  int64_t off = 0;
  for (const Shape& s : arch.param_shapes()) {
    const int64_t n = numel(s);
    if (off + n > flat.size())
      throw std::invalid_argument("unflatten: vector too short for architecture");
    Array t(s);
    std::copy(flat.data.begin() + static_cast<ptrdiff_t>(off),
              flat.data.begin() + static_cast<ptrdiff_t>(off + n),
              t.data.begin());
    p.tensors.push_back(std::move(t));
    off += n;
  }
  if (off != flat.size())
    throw std::invalid_argument("unflatten: vector length " +
                                std::to_string(flat.size()) +
                                " != parameter count " + std::to_string(off));
  return p;
}

Parameters init_params(const Architecture& arch, uint64_t seed) {
  arch.validate();
  Parameters p;
  SeedStream root(seed);
  int layer_index = 0;
  for (const LayerSpec& l : arch.layers) {
    if (l.kind != LayerKind::Conv2d && l.kind != LayerKind::Linear) {
      ++layer_index;
      continue;
    }
    const int fan_in =
        l.kind == LayerKind::Conv2d ? l.in * l.kernel * l.kernel : l.in;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    SeedStream ws = root.child("init/layer=" + std::to_string(layer_index));
    Shape wshape = l.kind == LayerKind::Conv2d
                       ? Shape{l.out, l.in, l.kernel, l.kernel}
                       : Shape{l.in, l.out};
    Array w(wshape);
    for (double& v : w.data) v = ws.uniform(-bound, bound);
    p.tensors.push_back(std::move(w));
    p.tensors.push_back(Array(Shape{l.out}, 0.0));
    ++layer_index;
  }
  return p;
}

GraphParams insert_params(Graph& g, const Parameters& params) {
  GraphParams gp;
  gp.tensors.reserve(params.tensors.size());
  for (const Array& t : params.tensors) gp.tensors.push_back(g.leaf(t));
  return gp;
}

ForwardTrace forward(Graph& g, const Architecture& arch, const GraphParams& gp,
                     Tensor batch, const std::vector<int>& labels) {
  const Shape& bs = batch.shape();
  if (bs.size() != 4 || bs[1] != arch.in_channels || bs[2] != arch.in_h ||
      bs[3] != arch.in_w)
    throw std::invalid_argument("forward: batch shape " + shape_str(bs) +
                                " does not match architecture input (N," +
                                std::to_string(arch.in_channels) + "," +
                                std::to_string(arch.in_h) + "," +
                                std::to_string(arch.in_w) + ")");
  const int N = bs[0];
  Tensor x = batch;
  Tensor penult;
  bool spatial = true;
  size_t pi = 0;
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const bool is_head = i + 1 == arch.layers.size();
    switch (l.kind) {
      case LayerKind::Conv2d: {
        Tensor w = gp.tensors[pi++];
        Tensor b = gp.tensors[pi++];
        x = g.add(g.conv2d(x, w, l.stride, l.padding),
                  g.reshape(b, {l.out, 1, 1}));
        break;
      }
      case LayerKind::ReLU:
        x = g.relu(x);
        break;
      case LayerKind::AvgPool2d:
        x = g.avgpool2d(x, l.kernel, l.stride);
        break;
      case LayerKind::Flatten: {
        const Shape& s = x.shape();
        x = g.reshape(x, {N, s[1] * s[2] * s[3]});
        spatial = false;
        break;
      }
      case LayerKind::Linear: {
        if (spatial) {
          const Shape& s = x.shape();
          x = g.reshape(x, {N, s[1] * s[2] * s[3]});
          spatial = false;
        }
        if (is_head) penult = x;
        Tensor w = gp.tensors[pi++];
        Tensor b = gp.tensors[pi++];
        x = g.add(g.matmul(x, w), b);
        break;
      }
    }
  }
  ForwardTrace trace;
  trace.logits = x;
  trace.probs = g.softmax(x);
  trace.penultimate = penult;
  if (!labels.empty())
    trace.loss = g.cross_entropy_with_softmax(x, labels);
  return trace;
}

std::vector<double> last_layer_grad_sums(Graph& g, const ForwardTrace& trace,
                                         const GraphParams& gp) {
  if (!trace.loss.valid())
    throw std::invalid_argument("last_layer_grad_sums: trace has no loss");
  if (gp.tensors.size() < 2)
    throw std::invalid_argument("last_layer_grad_sums: no parameters");
  Tensor wfc = gp.tensors[gp.tensors.size() - 2];
  GradientMap gm = g.grad(trace.loss, {wfc});
  const Shape& ws = gm[0].shape();  // (in, K)
  const int in = ws[0], k = ws[1];
  const auto& gv = gm[0].data();
  std::vector<double> sums(static_cast<size_t>(k), 0.0);
  for (int r = 0; r < in; ++r)
    for (int c = 0; c < k; ++c)
      sums[static_cast<size_t>(c)] += gv[static_cast<size_t>(r) * k + c];
  return sums;
}

}  // namespace fedleak
