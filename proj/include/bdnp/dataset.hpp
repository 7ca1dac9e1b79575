#pragma once

#include "bdnp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace bdnp {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images in [0,1] (8-bit channel values scaled by 1/255) with class labels.
struct Dataset {
  Tensor<double> images;  // [N,C,H,W]
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index channels() const { return images.dim(1); }
  Index height() const { return images.dim(2); }
  Index width() const { return images.dim(3); }
  Index image_size() const { return channels() * height() * width(); }

  /// Throws DataError if labels and images disagree or a label is out of range.
  void validate() const;

  Dataset subset(std::span<const Index> indices) const;

  template <typename Scalar>
  Tensor<Scalar> batch(std::span<const Index> indices) const {
    const Index per = image_size();
    Tensor<Scalar> out({static_cast<Index>(indices.size()), channels(), height(), width()});
    for (std::size_t k = 0; k < indices.size(); ++k) {
      out.data().segment(static_cast<Index>(k) * per, per) =
          images.data().segment(indices[k] * per, per).template cast<Scalar>();
    }
    return out;
  }

  template <typename Scalar>
  Tensor<Scalar> all_images() const {
    return images.cast<Scalar>();
  }

  std::vector<int> batch_labels(std::span<const Index> indices) const;
};

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte then
/// 1024 R, 1024 G, 1024 B bytes (32x32, row-major per plane).
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths);

struct SyntheticConfig {
  int classes = 4;
  int per_class = 100;
  Index size = 16;
  Index channels = 3;
  double noise = 0.06;
  Index jitter = 0;  // max per-image pattern shift in pixels
  std::uint64_t seed = 0;
};

/// Class k draws pattern family k % 4 (horizontal bars, vertical bars,
/// centred disc, checkerboard) with a scale and tint set by k, plus seeded
/// per-pixel noise, a per-image brightness offset and a per-image shift of up
/// to `jitter` pixels. Values stay within
/// [0, 0.9] so a white trigger remains distinguishable, and lie on the 1/255
/// grid so a dataset file round trip is exact. Records are class-interleaved.
Dataset generate_synthetic(const SyntheticConfig& config);

/// Noise-free class pattern [C,H,W] used by generate_synthetic, shifted by
/// (shift_y, shift_x) pixels.
Tensor<double> synthetic_template(int label, Index size, Index channels, Index shift_y = 0,
                                  Index shift_x = 0);

// Dataset file: "PDST" | u32 version | u32 N | u32 C | u32 H | u32 W |
// u8 labels[N] | u8 pixels[N*C*H*W], all little-endian.
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);

/// `num_classes` defaults to max(label) + 1 when not given.
Dataset load_dataset(const std::filesystem::path& path, std::optional<int> num_classes = std::nullopt);

}  // namespace bdnp
