#pragma once

#include "bdnp/binary_io.hpp"
#include "bdnp/network.hpp"

#include <array>
#include <filesystem>
#include <fstream>

namespace bdnp {

// Model file layout (all integers little-endian):
//   "BDNP" | u32 version | u8 precision bits (32|64) | u32 spec length | spec JSON
//   then one chunk per layer: u32 layer index | u32 tensor count |
//   tensors as u32 rank, u32 dims[rank], raw little-endian reals.
// Conv blocks store weight, gamma, beta, running_mean, running_var; the last
// chunk stores the classifier weight and bias.
inline constexpr std::array<char, 4> kModelMagic{'B', 'D', 'N', 'P'};
inline constexpr std::uint32_t kModelVersion = 1;

class ModelFormatError : public std::runtime_error {
 public:
  enum class Kind { kOpen, kBadMagic, kVersionMismatch, kPrecisionMismatch, kTruncated, kCorrupt };

  ModelFormatError(Kind kind, const std::string& msg, long layer = -1)
      : std::runtime_error(msg), kind_(kind), layer_(layer) {}

  Kind kind() const { return kind_; }
  /// Layer chunk being read when the error occurred, or -1.
  long layer() const { return layer_; }

 private:
  Kind kind_;
  long layer_;
};

template <typename Scalar>
constexpr std::uint8_t precision_tag() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? 32 : 64;
}

namespace detail {

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.size(); ++i) io::write_le<Scalar>(os, t[i]);
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is, long layer, const Shape& expected) {
  auto truncated = [layer]() {
    return ModelFormatError(ModelFormatError::Kind::kTruncated,
                            "model file truncated in layer " + std::to_string(layer), layer);
  };
  std::uint32_t rank = 0;
  if (!io::read_le(is, rank)) throw truncated();
  if (rank != expected.size()) {
    throw ModelFormatError(ModelFormatError::Kind::kCorrupt,
                           "layer " + std::to_string(layer) + ": tensor rank " +
                               std::to_string(rank) + " does not match the spec",
                           layer);
  }
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint32_t v = 0;
    if (!io::read_le(is, v)) throw truncated();
    d = static_cast<Index>(v);
  }
  if (shape != expected) {
    throw ModelFormatError(ModelFormatError::Kind::kCorrupt,
                           "layer " + std::to_string(layer) + ": tensor shape " +
                               shape_string(shape) + ", spec implies " + shape_string(expected),
                           layer);
  }
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) {
    if (!io::read_le(is, t[i])) throw truncated();
  }
  return t;
}

}  // namespace detail

template <typename Scalar>
void save_model(const std::filesystem::path& path, const NetworkSpec& spec,
                const NetworkParams<Scalar>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kModelMagic.data(), kModelMagic.size());
  io::write_le<std::uint32_t>(os, kModelVersion);
  io::write_le<std::uint8_t>(os, precision_tag<Scalar>());
  const std::string blob = spec.to_json().dump();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(blob.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const auto& b = params.blocks[i];
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(i));
    io::write_le<std::uint32_t>(os, 5);
    for (const auto* t : {&b.weight, &b.gamma, &b.beta, &b.running_mean, &b.running_var}) {
      detail::write_tensor(os, *t);
    }
  }
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.blocks.size()));
  io::write_le<std::uint32_t>(os, 2);
  detail::write_tensor(os, params.fc_weight);
  detail::write_tensor(os, params.fc_bias);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

struct ModelHeader {
  std::uint32_t version = 0;
  std::uint8_t precision_bits = 0;
  NetworkSpec spec;
};

namespace detail {

inline ModelHeader read_model_header(std::istream& is) {
  using Kind = ModelFormatError::Kind;
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 4 || magic != kModelMagic) {
    throw ModelFormatError(Kind::kBadMagic, "not a model file (bad magic)");
  }
  ModelHeader h;
  if (!io::read_le(is, h.version)) throw ModelFormatError(Kind::kTruncated, "model header truncated");
  if (h.version != kModelVersion) {
    throw ModelFormatError(Kind::kVersionMismatch, "model format version " +
                                                       std::to_string(h.version) + " unsupported");
  }
  std::uint32_t len = 0;
  if (!io::read_le(is, h.precision_bits) || !io::read_le(is, len)) {
    throw ModelFormatError(Kind::kTruncated, "model header truncated");
  }
  if (h.precision_bits != 32 && h.precision_bits != 64) {
    throw ModelFormatError(Kind::kCorrupt, "unknown precision tag " + std::to_string(h.precision_bits));
  }
  std::string blob(len, '\0');
  is.read(blob.data(), len);
  if (is.gcount() != static_cast<std::streamsize>(len)) {
    throw ModelFormatError(Kind::kTruncated, "model spec blob truncated");
  }
  try {
    h.spec = NetworkSpec::from_json(nlohmann::json::parse(blob));
  } catch (const std::exception& e) {
    throw ModelFormatError(Kind::kCorrupt, std::string("model spec unreadable: ") + e.what());
  }
  return h;
}

}  // namespace detail

inline ModelHeader read_model_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ModelFormatError(ModelFormatError::Kind::kOpen, "cannot open " + path.string());
  return detail::read_model_header(is);
}

template <typename Scalar>
struct LoadedModel {
  NetworkSpec spec;
  NetworkParams<Scalar> params;
};

template <typename Scalar>
LoadedModel<Scalar> load_model(const std::filesystem::path& path) {
  using Kind = ModelFormatError::Kind;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ModelFormatError(Kind::kOpen, "cannot open " + path.string());
  ModelHeader h = detail::read_model_header(is);
  if (h.precision_bits != precision_tag<Scalar>()) {
    throw ModelFormatError(Kind::kPrecisionMismatch,
                           "model stores " + std::to_string(h.precision_bits) +
                               "-bit reals, requested " +
                               std::to_string(precision_tag<Scalar>()) + "-bit");
  }
  LoadedModel<Scalar> m{h.spec, {}};
  const auto& spec = m.spec;

  auto chunk_header = [&](long layer, std::uint32_t expected_count) {
    std::uint32_t index = 0, count = 0;
    if (!io::read_le(is, index) || !io::read_le(is, count)) {
      throw ModelFormatError(Kind::kTruncated,
                             "model file truncated in layer " + std::to_string(layer), layer);
    }
    if (index != static_cast<std::uint32_t>(layer) || count != expected_count) {
      throw ModelFormatError(Kind::kCorrupt,
                             "unexpected chunk header at layer " + std::to_string(layer), layer);
    }
  };

  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const long layer = static_cast<long>(i);
    const auto& b = spec.blocks[i];
    const Index cout = b.out_channels;
    chunk_header(layer, 5);
    ConvBlockParams<Scalar> bp;
    bp.weight = detail::read_tensor<Scalar>(is, layer, {cout, spec.block_in_channels(i), b.kernel, b.kernel});
    bp.gamma = detail::read_tensor<Scalar>(is, layer, {cout});
    bp.beta = detail::read_tensor<Scalar>(is, layer, {cout});
    bp.running_mean = detail::read_tensor<Scalar>(is, layer, {cout});
    bp.running_var = detail::read_tensor<Scalar>(is, layer, {cout});
    m.params.blocks.push_back(std::move(bp));
  }
  const long last = static_cast<long>(spec.blocks.size());
  chunk_header(last, 2);
  m.params.fc_weight = detail::read_tensor<Scalar>(is, last, {spec.num_classes, spec.feature_width()});
  m.params.fc_bias = detail::read_tensor<Scalar>(is, last, {spec.num_classes});
  if (is.peek() != std::char_traits<char>::eof()) {
    throw ModelFormatError(Kind::kCorrupt, "trailing bytes after the last layer");
  }
  return m;
}

}  // namespace bdnp
