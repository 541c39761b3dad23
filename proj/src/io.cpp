#include "fedleak/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace fedleak {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw io_error("tensor file " + path.string() + ": truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

constexpr char kMagic[4] = {'F', 'L', 'T', '1'};
constexpr uint8_t kVersion = 1;

}  // namespace

void save_tensor(const Array& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  os.put(static_cast<char>(t.shape.size()));
  for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
  for (double v : t.data) put_f64(os, v);
  if (!os) throw io_error("write failed for " + path.string());
}

Array load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw io_error("tensor file " + path.string() + ": bad magic");
  const int version = is.get();
  if (version != kVersion)
    throw io_error("tensor file " + path.string() + ": unsupported version " +
                   std::to_string(version));
  const int rank = is.get();
  if (rank < 0 || rank > 8)
    throw io_error("tensor file " + path.string() + ": bad rank");
  Shape shape(static_cast<size_t>(rank));
  for (int d = 0; d < rank; ++d)
    shape[static_cast<size_t>(d)] = static_cast<int>(get_u32(is, path));
  const int64_t n = numel(shape);
  std::vector<unsigned char> raw(static_cast<size_t>(n) * 8);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    const auto got = is.gcount();
    throw io_error("tensor file " + path.string() + ": expected " +
                   std::to_string(n * 8) + " payload bytes, got " +
                   std::to_string(got));
  }
  std::vector<double> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<uint64_t>(raw[static_cast<size_t>(i * 8 + b)]) << (8 * b);
    std::memcpy(&data[static_cast<size_t>(i)], &bits, 8);
  }
  return Array(std::move(shape), std::move(data));
}

void save_parameters(const Parameters& p, const std::filesystem::path& path) {
  save_tensor(p.flatten(), path);
}

Parameters load_parameters(const Architecture& arch,
                           const std::filesystem::path& path) {
  return Parameters::unflatten(arch, load_tensor(path));
}

void save_dataset(const ClientDataset& d, const std::filesystem::path& inputs,
                  const std::filesystem::path& labels) {
  save_tensor(d.inputs, inputs);
  std::ofstream os(labels);
  if (!os) throw io_error("cannot open " + labels.string() + " for writing");
  for (int y : d.labels) os << y << "\n";
  if (!os) throw io_error("write failed for " + labels.string());
}

ClientDataset load_dataset(const std::filesystem::path& inputs,
                           const std::filesystem::path& labels,
                           int num_classes) {
  ClientDataset d;
  d.inputs = load_tensor(inputs);
  d.num_classes = num_classes;
  std::ifstream is(labels);
  if (!is) throw io_error("cannot open " + labels.string());
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    d.labels.push_back(std::stoi(line));
  }
  d.validate();
  return d;
}

void export_image_grid(const std::vector<Array>& images,
                       const std::filesystem::path& path) {
  if (images.empty()) throw std::invalid_argument("export_image_grid: no images");
  const Shape& s = images[0].shape;
  if (s.size() != 3)
    throw std::invalid_argument("export_image_grid: images must be (C,H,W), got " +
                                shape_str(s));
  const int c = s[0], h = s[1], w = s[2];
  if (c != 1 && c != 3)
    throw std::invalid_argument("export_image_grid: unsupported channel count " +
                                std::to_string(c));
  for (const Array& img : images)
    if (img.shape != s)
      throw std::invalid_argument("export_image_grid: mixed image shapes");

  const int n = static_cast<int>(images.size());
  int cols = 1;
  while (cols * cols < n) ++cols;
  const int rows = (n + cols - 1) / cols;
  const int gw = cols * w + (cols - 1);
  const int gh = rows * h + (rows - 1);

  auto to_byte = [](double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
  };

  // separator pixels are white
  std::vector<unsigned char> pix(static_cast<size_t>(gw) * gh * c, 255);
  for (int i = 0; i < n; ++i) {
    const int r0 = (i / cols) * (h + 1);
    const int c0 = (i % cols) * (w + 1);
    const Array& img = images[static_cast<size_t>(i)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          pix[(static_cast<size_t>(r0 + y) * gw + (c0 + x)) * c + ch] =
              to_byte(img.data[static_cast<size_t>((ch * h + y) * w + x)]);
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open " + path.string() + " for writing");
  os << (c == 1 ? "P5" : "P6") << "\n" << gw << " " << gh << "\n255\n";
  os.write(reinterpret_cast<const char*>(pix.data()),
           static_cast<std::streamsize>(pix.size()));
  if (!os) throw io_error("write failed for " + path.string());
}

namespace {

// Smooth random field: a low-resolution uniform grid upsampled bilinearly.
Array smooth_field(SeedStream s, int channels, int h, int w, int grid) {
  Array low({channels, grid, grid});
  for (double& v : low.data) v = s.uniform();
  Array out({channels, h, w});
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double fy = (y + 0.5) * grid / h - 0.5;
        const double fx = (x + 0.5) * grid / w - 0.5;
        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, grid - 1);
        const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, grid - 1);
        const int y1 = std::min(y0 + 1, grid - 1);
        const int x1 = std::min(x0 + 1, grid - 1);
        const double ty = std::clamp(fy - y0, 0.0, 1.0);
        const double tx = std::clamp(fx - x0, 0.0, 1.0);
        auto at = [&](int yy, int xx) {
          return low.data[static_cast<size_t>((c * grid + yy) * grid + xx)];
        };
        out.data[static_cast<size_t>((c * h + y) * w + x)] =
            (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
            ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
      }
  return out;
}

// min-max stretch into [lo, hi]; constant fields map to the midpoint
void stretch(Array& a, double lo, double hi) {
  double mn = a.data[0], mx = a.data[0];
  for (double v : a.data) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  const double span = mx - mn;
  for (double& v : a.data)
    v = span > 0 ? lo + (hi - lo) * (v - mn) / span : 0.5 * (lo + hi);
}

}  // namespace

ClientDataset generate_synthetic(const std::vector<int>& per_class,
                                 int channels, int h, int w, uint64_t seed) {
  const int num_classes = static_cast<int>(per_class.size());
  if (num_classes < 1 || channels < 1 || h < 1 || w < 1)
    throw std::invalid_argument("generate_synthetic: bad dimensions");
  int n = 0;
  for (int c : per_class) {
    if (c < 0) throw std::invalid_argument("generate_synthetic: negative count");
    n += c;
  }
  if (n < 1) throw std::invalid_argument("generate_synthetic: empty dataset");

  SeedStream root = SeedStream(seed).child("synthetic");
  const int grid = 3;
  const double noise_amp = 0.05;

  std::vector<Array> templates;
  templates.reserve(static_cast<size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    Array t = smooth_field(root.child("template/class=" + std::to_string(k)),
                           channels, h, w, grid);
    // gamma-shape the field into a dark background with bright smooth blobs
    stretch(t, 0.0, 1.0);
    for (double& v : t.data) v = std::pow(v, 2.4);
    stretch(t, 0.02, 0.95);
    templates.push_back(std::move(t));
  }

  // (class, index-within-class) items, shuffled into dataset order
  std::vector<std::pair<int, int>> items;
  items.reserve(static_cast<size_t>(n));
  for (int k = 0; k < num_classes; ++k)
    for (int j = 0; j < per_class[static_cast<size_t>(k)]; ++j)
      items.emplace_back(k, j);

  ClientDataset d;
  d.num_classes = num_classes;
  d.inputs = Array({n, channels, h, w});
  d.labels.resize(static_cast<size_t>(n));

  std::vector<int> order = root.child("order").permutation(n);
  const int64_t row = static_cast<int64_t>(channels) * h * w;
  for (int slot = 0; slot < n; ++slot) {
    const auto [k, j] = items[static_cast<size_t>(order[static_cast<size_t>(slot)])];
    Array noise = smooth_field(root.child("noise/class=" + std::to_string(k) +
                                          "/example=" + std::to_string(j)),
                               channels, h, w, grid);
    double* dst = d.inputs.data.data() + static_cast<int64_t>(slot) * row;
    const Array& tmpl = templates[static_cast<size_t>(k)];
    for (int64_t i = 0; i < row; ++i)
      dst[i] = std::clamp(tmpl.data[static_cast<size_t>(i)] +
                              noise_amp * (2.0 * noise.data[static_cast<size_t>(i)] - 1.0),
                          0.0, 1.0);
    d.labels[static_cast<size_t>(slot)] = k;
  }
  return d;
}

ClientDataset generate_synthetic(int num_classes, int per_class, int channels,
                                 int h, int w, uint64_t seed) {
  if (num_classes < 1)
    throw std::invalid_argument("generate_synthetic: bad class count");
  return generate_synthetic(
      std::vector<int>(static_cast<size_t>(num_classes), per_class), channels,
      h, w, seed);
}

}  // namespace fedleak
