#pragma once

#include "bdnp/dataset.hpp"
#include "bdnp/network.hpp"

#include <functional>
#include <numeric>
#include <ostream>

namespace bdnp {

struct TrainConfig {
  int epochs = 30;
  Index batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;  // drives the epoch shuffle only
  bool shuffle = true;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train config: momentum must lie in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},       {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"momentum", momentum},   {"seed", seed},             {"shuffle", shuffle}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    c.shuffle = j.value("shuffle", c.shuffle);
    return c;
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // fraction of training records, measured in train mode
};

struct TrainHistory {
  std::vector<EpochStats> epochs;

  void write_csv(std::ostream& os) const {
    os << "epoch,loss,acc\n";
    os.precision(17);
    for (const auto& e : epochs) os << e.epoch << ',' << e.loss << ',' << e.accuracy << '\n';
  }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(long step, double loss)
      : std::runtime_error("training diverged at step " + std::to_string(step) +
                           " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

template <typename Scalar>
struct TrainResult {
  NetworkParams<Scalar> params;
  TrainHistory history;
};

/// Minibatch SGD with momentum on softmax cross-entropy, batch-norm in train
/// mode. Runs epochs * ceil(N / batch_size) steps; the last batch of an epoch
/// may be short.
template <typename Scalar>
TrainResult<Scalar> train(const NetworkSpec& spec, NetworkParams<Scalar> params,
                          const Dataset& data, const TrainConfig& config,
                          const std::function<void(const EpochStats&)>& on_epoch = {}) {
  config.validate();
  data.validate();
  if (data.size() == 0) throw std::invalid_argument("train: dataset is empty");

  const auto lr = static_cast<Scalar>(config.learning_rate);
  const auto momentum = static_cast<Scalar>(config.momentum);
  std::vector<ConvBlockParams<Scalar>> velocity(params.blocks.size());
  Tensor<Scalar> v_fc_w, v_fc_b;

  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 shuffle_rng(config.seed);

  TrainResult<Scalar> result;
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle) std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    Index correct = 0;
    for (Index start = 0; start < data.size(); start += config.batch_size) {
      const Index len = std::min(config.batch_size, data.size() - start);
      std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(len));
      Tape<Scalar> tape;
      GraphVars vars = record_forward(tape, spec, params, data.batch<Scalar>(idx), Mode::kTrain, &params);
      std::vector<int> labels = data.batch_labels(idx);
      const Var loss = tape.softmax_cross_entropy(vars.logits, labels);
      const double loss_value = static_cast<double>(tape.value(loss)[0]);
      ++step;
      if (!std::isfinite(loss_value)) throw DivergenceError(step, loss_value);
      loss_sum += loss_value * static_cast<double>(len);

      const auto& logits = tape.value(vars.logits);
      for (Index r = 0; r < len; ++r) {
        Index best = 0;
        for (Index k = 1; k < logits.dim(1); ++k) {
          if (logits(r, k) > logits(r, best)) best = k;
        }
        if (best == labels[static_cast<std::size_t>(r)]) ++correct;
      }

      tape.backward(loss);
      for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        auto& p = params.blocks[b];
        auto& v = velocity[b];
        sgd_step(p.weight, tape.grad(vars.blocks[b].weight), v.weight, lr, momentum);
        sgd_step(p.gamma, tape.grad(vars.blocks[b].gamma), v.gamma, lr, momentum);
        sgd_step(p.beta, tape.grad(vars.blocks[b].beta), v.beta, lr, momentum);
      }
      sgd_step(params.fc_weight, tape.grad(vars.fc_weight), v_fc_w, lr, momentum);
      sgd_step(params.fc_bias, tape.grad(vars.fc_bias), v_fc_b, lr, momentum);
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(data.size()),
                     static_cast<double>(correct) / static_cast<double>(data.size())};
    result.history.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace bdnp
