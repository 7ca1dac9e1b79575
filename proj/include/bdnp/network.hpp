#pragma once

#include "bdnp/tape.hpp"

#include <json.hpp>

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace bdnp {

struct ConvBlockSpec {
  Index out_channels = 16;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
  bool pool = false;
  double eps = 1e-5;
};

/// Sequential conv/BN/ReLU stack followed by global average pooling and a
/// dense classifier. Every conv block is a scored layer.
struct NetworkSpec {
  Index in_channels = 3;
  Index height = 16;
  Index width = 16;
  std::vector<ConvBlockSpec> blocks;
  Index num_classes = 4;
  double bn_momentum = 0.1;

  /// Conv(16)-BN-ReLU-Pool / Conv(32)-BN-ReLU-Pool / Conv(64)-BN-ReLU / GAP / Dense.
  static NetworkSpec desk_default(Index in_channels, Index height, Index width, Index num_classes);

  Index block_in_channels(std::size_t block) const {
    return block == 0 ? in_channels : blocks[block - 1].out_channels;
  }
  Index total_filters() const {
    Index n = 0;
    for (const auto& b : blocks) n += b.out_channels;
    return n;
  }
  Index feature_width() const { return blocks.empty() ? in_channels : blocks.back().out_channels; }

  /// Throws std::invalid_argument on an inconsistent spec.
  void validate() const;

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
};

inline NetworkSpec NetworkSpec::desk_default(Index in_channels, Index height, Index width,
                                             Index num_classes) {
  NetworkSpec s;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.num_classes = num_classes;
  s.blocks = {ConvBlockSpec{16, 3, 1, 1, true, 1e-5}, ConvBlockSpec{32, 3, 1, 1, true, 1e-5},
              ConvBlockSpec{64, 3, 1, 1, false, 1e-5}};
  return s;
}

inline void NetworkSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("network spec: " + msg); };
  if (in_channels < 1 || height < 1 || width < 1) fail("input dims must be positive");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (blocks.empty()) fail("at least one conv block is required");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must lie in [0, 1]");
  Index h = height, w = width;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string at = "block " + std::to_string(i) + ": ";
    if (b.out_channels < 1) fail(at + "out_channels must be positive");
    if (b.kernel < 1 || b.stride < 1 || b.padding < 0) fail(at + "bad conv geometry");
    if (!(b.eps > 0.0)) fail(at + "batch-norm eps must be positive");
    if (b.kernel > h + 2 * b.padding || b.kernel > w + 2 * b.padding) fail(at + "kernel exceeds input");
    const ConvGeometry g{b.stride, b.padding};
    h = ops::conv_output_extent(h, b.kernel, g);
    w = ops::conv_output_extent(w, b.kernel, g);
    if (b.pool) {
      if (h % 2 != 0 || w % 2 != 0) fail(at + "pooling needs even spatial dims");
      h /= 2;
      w /= 2;
    }
  }
}

inline nlohmann::json NetworkSpec::to_json() const {
  nlohmann::json blocks_json = nlohmann::json::array();
  for (const auto& b : blocks) {
    blocks_json.push_back({{"out_channels", b.out_channels},
                           {"kernel", b.kernel},
                           {"stride", b.stride},
                           {"padding", b.padding},
                           {"batchnorm", true},
                           {"activation", "relu"},
                           {"pool", b.pool},
                           {"eps", b.eps}});
  }
  return {{"input", {{"channels", in_channels}, {"height", height}, {"width", width}}},
          {"blocks", blocks_json},
          {"num_classes", num_classes},
          {"bn_momentum", bn_momentum}};
}

inline NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  const auto& in = j.at("input");
  s.in_channels = in.at("channels").get<Index>();
  s.height = in.at("height").get<Index>();
  s.width = in.at("width").get<Index>();
  s.num_classes = j.at("num_classes").get<Index>();
  s.bn_momentum = j.value("bn_momentum", 0.1);
  for (const auto& bj : j.at("blocks")) {
    if (!bj.value("batchnorm", true)) {
      throw std::invalid_argument("network spec: every conv block must carry batch-norm");
    }
    if (bj.value("activation", std::string("relu")) != "relu") {
      throw std::invalid_argument("network spec: only relu activation is supported");
    }
    ConvBlockSpec b;
    b.out_channels = bj.at("out_channels").get<Index>();
    b.kernel = bj.value("kernel", Index{3});
    b.stride = bj.value("stride", Index{1});
    b.padding = bj.value("padding", Index{1});
    b.pool = bj.value("pool", false);
    b.eps = bj.value("eps", 1e-5);
    s.blocks.push_back(b);
  }
  s.validate();
  return s;
}

template <typename Scalar>
struct ConvBlockParams {
  Tensor<Scalar> weight;  // [Cout, Cin, Kh, Kw]
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
};

template <typename Scalar>
struct NetworkParams {
  std::vector<ConvBlockParams<Scalar>> blocks;
  Tensor<Scalar> fc_weight;  // [num_classes, features]
  Tensor<Scalar> fc_bias;    // [num_classes]
};

template <typename Scalar>
bool bitwise_equal(const NetworkParams<Scalar>& a, const NetworkParams<Scalar>& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    const auto& x = a.blocks[i];
    const auto& y = b.blocks[i];
    if (!bitwise_equal(x.weight, y.weight) || !bitwise_equal(x.gamma, y.gamma) ||
        !bitwise_equal(x.beta, y.beta) || !bitwise_equal(x.running_mean, y.running_mean) ||
        !bitwise_equal(x.running_var, y.running_var)) {
      return false;
    }
  }
  return bitwise_equal(a.fc_weight, b.fc_weight) && bitwise_equal(a.fc_bias, b.fc_bias);
}

/// He-uniform conv weights (variance 2 / fan_in), identity batch-norm
/// (gamma 1, beta 0, mean 0, var 1), uniform +-1/sqrt(F) classifier weights
/// and a zero classifier bias.
template <typename Scalar>
NetworkParams<Scalar> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  NetworkParams<Scalar> p;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const Index cin = spec.block_in_channels(i);
    const double fan_in = static_cast<double>(cin * b.kernel * b.kernel);
    const auto bound = static_cast<Scalar>(std::sqrt(6.0 / fan_in));
    ConvBlockParams<Scalar> bp;
    bp.weight = Tensor<Scalar>::uniform({b.out_channels, cin, b.kernel, b.kernel}, -bound, bound, rng);
    bp.gamma = Tensor<Scalar>::constant({b.out_channels}, Scalar(1));
    bp.beta = Tensor<Scalar>({b.out_channels});
    bp.running_mean = Tensor<Scalar>({b.out_channels});
    bp.running_var = Tensor<Scalar>::constant({b.out_channels}, Scalar(1));
    p.blocks.push_back(std::move(bp));
  }
  const Index features = spec.feature_width();
  const auto bound = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(features)));
  p.fc_weight = Tensor<Scalar>::uniform({spec.num_classes, features}, -bound, bound, rng);
  p.fc_bias = Tensor<Scalar>({spec.num_classes});
  return p;
}

/// Post-ReLU channel maps of every scored layer, one [N,C,H,W] tensor per layer.
template <typename Scalar>
struct ActivationTrace {
  std::vector<Tensor<Scalar>> layers;
};

/// Tape handles for every parameter and captured activation of one pass.
struct GraphVars {
  struct Block {
    Var weight, gamma, beta, activation;
  };
  Var input;
  std::vector<Block> blocks;
  Var fc_weight, fc_bias;
  Var logits;
};

/// Records one forward pass on `tape`. Parameters become gradient-tracked
/// leaves. In train mode, batch-norm running statistics are written into
/// `stats_sink` (required); infer mode reads them from `params`.
template <typename Scalar>
GraphVars record_forward(Tape<Scalar>& tape, const NetworkSpec& spec,
                         const NetworkParams<Scalar>& params, const Tensor<Scalar>& batch,
                         Mode mode, NetworkParams<Scalar>* stats_sink = nullptr) {
  batch.require_rank(4, "network input");
  if (batch.dim(1) != spec.in_channels || batch.dim(2) != spec.height ||
      batch.dim(3) != spec.width) {
    throw ShapeError("network input " + shape_string(batch.shape()) + " does not match spec [N," +
                     std::to_string(spec.in_channels) + "," + std::to_string(spec.height) + "," +
                     std::to_string(spec.width) + "]");
  }
  if (params.blocks.size() != spec.blocks.size()) {
    throw ShapeError("network params carry " + std::to_string(params.blocks.size()) +
                     " blocks, spec has " + std::to_string(spec.blocks.size()));
  }
  if (mode == Mode::kTrain && stats_sink == nullptr) {
    throw std::invalid_argument("record_forward: train mode needs a running-statistics sink");
  }

  GraphVars vars;
  vars.input = tape.leaf(batch);
  Var h = vars.input;
  const auto momentum = static_cast<Scalar>(spec.bn_momentum);
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& bs = spec.blocks[i];
    const auto& bp = params.blocks[i];
    GraphVars::Block bv;
    bv.weight = tape.leaf(bp.weight, true);
    bv.gamma = tape.leaf(bp.gamma, true);
    bv.beta = tape.leaf(bp.beta, true);
    h = tape.conv2d(h, bv.weight, std::nullopt, ConvGeometry{bs.stride, bs.padding});
    const auto eps = static_cast<Scalar>(bs.eps);
    if (mode == Mode::kTrain) {
      auto& sink = stats_sink->blocks[i];
      h = tape.batchnorm_train(h, bv.gamma, bv.beta, sink.running_mean, sink.running_var, eps,
                               momentum);
    } else {
      h = tape.batchnorm_infer(h, bv.gamma, bv.beta, bp.running_mean, bp.running_var, eps);
    }
    h = tape.relu(h);
    bv.activation = h;
    if (bs.pool) h = tape.maxpool2(h);
    vars.blocks.push_back(bv);
  }
  h = tape.global_avg_pool(h);
  vars.fc_weight = tape.leaf(params.fc_weight, true);
  vars.fc_bias = tape.leaf(params.fc_bias, true);
  vars.logits = tape.dense(h, vars.fc_weight, vars.fc_bias);
  return vars;
}

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;
  std::optional<ActivationTrace<Scalar>> trace;
  Tape<Scalar> tape;
  GraphVars vars;
};

/// Forward pass. Train mode updates the running statistics held in `params`.
template <typename Scalar>
ForwardResult<Scalar> forward(const NetworkSpec& spec, NetworkParams<Scalar>& params,
                              const Tensor<Scalar>& batch, bool capture, Mode mode) {
  ForwardResult<Scalar> r;
  r.vars = record_forward(r.tape, spec, params, batch, mode, mode == Mode::kTrain ? &params : nullptr);
  r.logits = r.tape.value(r.vars.logits);
  if (capture) {
    ActivationTrace<Scalar> trace;
    for (const auto& b : r.vars.blocks) trace.layers.push_back(r.tape.value(b.activation));
    r.trace = std::move(trace);
  }
  return r;
}

/// Infer-mode forward over read-only params.
template <typename Scalar>
ForwardResult<Scalar> forward(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                              const Tensor<Scalar>& batch, bool capture) {
  ForwardResult<Scalar> r;
  r.vars = record_forward(r.tape, spec, params, batch, Mode::kInfer);
  r.logits = r.tape.value(r.vars.logits);
  if (capture) {
    ActivationTrace<Scalar> trace;
    for (const auto& b : r.vars.blocks) trace.layers.push_back(r.tape.value(b.activation));
    r.trace = std::move(trace);
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> infer_logits(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                            const Tensor<Scalar>& batch) {
  return forward(spec, params, batch, false).logits;
}

/// Folds batch-norm scale into the conv weights: W_c * gamma_c / sqrt(var_c + eps).
template <typename Scalar>
Tensor<Scalar> fuse_conv_bn(const Tensor<Scalar>& weights, const Tensor<Scalar>& gamma,
                            const Tensor<Scalar>& running_var, Scalar eps) {
  weights.require_rank(4, "fuse_conv_bn weights");
  const Index cout = weights.dim(0);
  ops::detail::check_channel_vector(gamma, cout, "fuse_conv_bn gamma");
  ops::detail::check_channel_vector(running_var, cout, "fuse_conv_bn running_var");
  const Index per = weights.size() / std::max<Index>(cout, 1);
  Tensor<Scalar> fused = weights;
  auto m = fused.matrix(cout, per);
  for (Index c = 0; c < cout; ++c) {
    const Scalar sigma = std::sqrt(running_var[c] + eps);
    if (!(sigma > Scalar(0))) {
      throw std::invalid_argument("fuse_conv_bn: channel " + std::to_string(c) + " has zero sigma");
    }
    m.row(c) *= gamma[c] / sigma;
  }
  return fused;
}

/// Per-channel offset beta - gamma * mean / sigma that completes the fused conv.
template <typename Scalar>
Tensor<Scalar> fused_bn_offset(const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                               const Tensor<Scalar>& running_mean,
                               const Tensor<Scalar>& running_var, Scalar eps) {
  Tensor<Scalar> offset(gamma.shape());
  for (Index c = 0; c < gamma.size(); ++c) {
    offset[c] = beta[c] - gamma[c] * running_mean[c] / std::sqrt(running_var[c] + eps);
  }
  return offset;
}

}  // namespace bdnp
