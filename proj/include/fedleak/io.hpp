#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "fedleak/fedavg.hpp"
#include "fedleak/random.hpp"
#include "fedleak/tensor.hpp"

namespace fedleak {

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor container ("FLT1"): 4-byte magic, u8 version (1), u8 rank,
// rank u32 little-endian dims, then row-major f64 little-endian payload.
// Round-trips are bit-exact and endianness is fixed regardless of host.
void save_tensor(const Array& t, const std::filesystem::path& path);
Array load_tensor(const std::filesystem::path& path);

// Parameters as one flattened tensor file (layer order, weight then bias).
void save_parameters(const Parameters& p, const std::filesystem::path& path);
Parameters load_parameters(const Architecture& arch,
                           const std::filesystem::path& path);

// Dataset = inputs tensor file + label text file (one decimal class id per
// line, newline-terminated).
void save_dataset(const ClientDataset& d, const std::filesystem::path& inputs,
                  const std::filesystem::path& labels);
ClientDataset load_dataset(const std::filesystem::path& inputs,
                           const std::filesystem::path& labels,
                           int num_classes);

/// Tiles (C,H,W) images row-major with a 1-pixel white separator and writes
/// binary PGM (1 channel) or PPM (3 channels). Values are clamped to [0,1]
/// and scaled to 0..255 with round-half-up.
void export_image_grid(const std::vector<Array>& images,
                       const std::filesystem::path& path);

/// Class-conditional synthetic images: a fixed smooth per-class template plus
/// smooth per-example noise, clamped to [0,1]. Labels are balanced as
/// requested and the example order is shuffled deterministically.
ClientDataset generate_synthetic(const std::vector<int>& per_class,
                                 int channels, int h, int w, uint64_t seed);
ClientDataset generate_synthetic(int num_classes, int per_class, int channels,
                                 int h, int w, uint64_t seed);

}  // namespace fedleak
