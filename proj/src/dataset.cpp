#include "bdnp/dataset.hpp"

#include "bdnp/binary_io.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace bdnp {

namespace {

constexpr std::array<char, 4> kDatasetMagic{'P', 'D', 'S', 'T'};
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::size_t kCifarRecord = 3073;
constexpr Index kCifarSide = 32;

double quantize(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

void Dataset::validate() const {
  if (images.rank() != 4) throw DataError("dataset images must be [N,C,H,W]");
  if (images.dim(0) != size()) {
    throw DataError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                    std::to_string(size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const Index> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.images = batch<double>(indices);
  out.labels = batch_labels(indices);
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths) {
  std::vector<unsigned char> bytes;
  for (const auto& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open CIFAR file " + path.string());
    std::vector<unsigned char> chunk((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (chunk.size() % kCifarRecord != 0) {
      throw DataError(path.string() + ": length " + std::to_string(chunk.size()) +
                      " is not a multiple of " + std::to_string(kCifarRecord));
    }
    bytes.insert(bytes.end(), chunk.begin(), chunk.end());
  }
  const auto n = static_cast<Index>(bytes.size() / kCifarRecord);
  Dataset d;
  d.num_classes = 10;
  d.images = Tensor<double>({n, 3, kCifarSide, kCifarSide});
  d.labels.resize(static_cast<std::size_t>(n));
  const Index per = 3 * kCifarSide * kCifarSide;
  for (Index r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * static_cast<Index>(kCifarRecord);
    if (rec[0] > 9) {
      throw DataError("CIFAR record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    }
    d.labels[static_cast<std::size_t>(r)] = rec[0];
    for (Index k = 0; k < per; ++k) d.images[r * per + k] = rec[1 + k] / 255.0;
  }
  return d;
}

Tensor<double> synthetic_template(int label, Index size, Index channels, Index shift_y, Index shift_x) {
  const int family = label % 4;
  const int variant = label / 4;
  Tensor<double> t({1, channels, size, size});
  const double period = std::max(4.0, size / (2.0 + variant));
  const double radius = size * (0.28 + 0.06 * variant);
  const Index cell = std::max<Index>(2, size / (4 + 2 * variant));
  const double centre = (size - 1) / 2.0;
  for (Index c = 0; c < channels; ++c) {
    const double tint = 0.75 + 0.25 * ((label + c) % 3) / 2.0;
    for (Index yy = 0; yy < size; ++yy) {
      for (Index xx = 0; xx < size; ++xx) {
        const Index y = yy - shift_y, x = xx - shift_x;
        double v = 0.0;
        switch (family) {
          case 0:
            v = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * y / period);
            break;
          case 1:
            v = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * x / period);
            break;
          case 2:
            v = std::hypot(y - centre, x - centre) <= radius ? 1.0 : 0.0;
            break;
          default:
            v = (((y + size) / cell + (x + size) / cell) % 2 == 0) ? 1.0 : 0.0;
            break;
        }
        t(0, c, yy, xx) = tint * (0.1 + 0.6 * v);
      }
    }
  }
  return t.reshaped({channels, size, size});
}

Dataset generate_synthetic(const SyntheticConfig& config) {
  if (config.size < 8) throw DataError("synthetic images need size >= 8");
  if (config.classes < 2 || config.classes > 255) throw DataError("synthetic classes must lie in [2, 255]");
  if (config.per_class < 1) throw DataError("synthetic per_class must be positive");
  if (config.jitter < 0) throw DataError("synthetic jitter must be >= 0");
  const Index n = static_cast<Index>(config.classes) * config.per_class;
  const Index per = config.channels * config.size * config.size;
  Dataset d;
  d.num_classes = config.classes;
  d.images = Tensor<double>({n, config.channels, config.size, config.size});
  d.labels.resize(static_cast<std::size_t>(n));
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, config.noise);
  std::uniform_real_distribution<double> brightness(-0.05, 0.05);
  std::uniform_int_distribution<Index> shift(-config.jitter, config.jitter);
  Index r = 0;
  for (int i = 0; i < config.per_class; ++i) {
    for (int k = 0; k < config.classes; ++k, ++r) {
      d.labels[static_cast<std::size_t>(r)] = k;
      const Index dy = shift(rng);
      const Index dx = shift(rng);
      const double offset = brightness(rng);
      const Tensor<double> tpl = synthetic_template(k, config.size, config.channels, dy, dx);
      for (Index p = 0; p < per; ++p) {
        const double v = std::clamp(tpl[p] + offset + noise(rng), 0.0, 0.9);
        d.images[r * per + p] = quantize(v);
      }
    }
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  dataset.validate();
  if (dataset.num_classes > 256) throw DataError("dataset file stores labels as u8");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(kDatasetMagic.data(), kDatasetMagic.size());
  io::write_le<std::uint32_t>(os, kDatasetVersion);
  for (Index d : {dataset.size(), dataset.channels(), dataset.height(), dataset.width()}) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (int y : dataset.labels) io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(y));
  for (Index i = 0; i < dataset.images.size(); ++i) {
    const double v = std::clamp(dataset.images[i], 0.0, 1.0);
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(std::lround(v * 255.0)));
  }
  if (!os) throw DataError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path, std::optional<int> num_classes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 4 || magic != kDatasetMagic) throw DataError(path.string() + ": bad dataset magic");
  std::uint32_t version = 0;
  std::array<std::uint32_t, 4> dims{};
  if (!io::read_le(is, version)) throw DataError(path.string() + ": truncated header");
  if (version != kDatasetVersion) {
    throw DataError(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  for (auto& v : dims) {
    if (!io::read_le(is, v)) throw DataError(path.string() + ": truncated header");
  }
  const Index n = dims[0];
  Dataset d;
  d.images = Tensor<double>({n, dims[1], dims[2], dims[3]});
  d.labels.resize(static_cast<std::size_t>(n));
  std::vector<unsigned char> buf(static_cast<std::size_t>(n + d.images.size()));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError(path.string() + ": truncated body");
  int max_label = -1;
  for (Index i = 0; i < n; ++i) {
    d.labels[static_cast<std::size_t>(i)] = buf[static_cast<std::size_t>(i)];
    max_label = std::max(max_label, static_cast<int>(buf[static_cast<std::size_t>(i)]));
  }
  for (Index i = 0; i < d.images.size(); ++i) d.images[i] = buf[static_cast<std::size_t>(n + i)] / 255.0;
  d.num_classes = num_classes.value_or(max_label + 1);
  d.validate();
  return d;
}

}  // namespace bdnp
