#pragma once

#include "bdnp/network.hpp"
#include "bdnp/scorer.hpp"

#include <span>

namespace bdnp {

struct PruneConfig {
  double mu = 3.5;

  void validate() const {
    if (!(mu >= 0.0)) throw std::invalid_argument("prune config: mu must be >= 0");
  }
};

/// Mean and population standard deviation of one layer's scores.
struct LayerMoments {
  double mean = 0.0;
  double stddev = 0.0;
};

LayerMoments layer_moments(std::span<const double> scores);

/// mean + mu * population std of the layer's scores.
double layer_threshold(std::span<const double> scores, double mu);

struct LayerPruneReport {
  Index layer = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double threshold = 0.0;
  std::vector<Index> pruned;  // filters with score strictly above threshold
};

struct PruneReport {
  double mu = 0.0;
  std::vector<LayerPruneReport> layers;

  Index total_pruned() const;
  nlohmann::json to_json() const;
};

/// Per-layer outlier selection over a score table.
PruneReport select_filters(const ScoreTable& table, double mu);

template <typename Scalar>
struct PruneOutcome {
  NetworkParams<Scalar> params;
  PruneReport report;
};

/// Zeroes batch-norm gamma and beta of every selected channel on a copy of
/// `params`. Conv weights are left untouched.
template <typename Scalar>
NetworkParams<Scalar> apply_prune(NetworkParams<Scalar> params, const PruneReport& report) {
  for (const auto& layer : report.layers) {
    auto& bp = params.blocks.at(static_cast<std::size_t>(layer.layer));
    for (Index c : layer.pruned) {
      bp.gamma[c] = Scalar(0);
      bp.beta[c] = Scalar(0);
    }
  }
  return params;
}

inline void check_table_matches(const NetworkSpec& spec, const ScoreTable& table) {
  if (table.layers.size() != spec.blocks.size()) {
    throw std::invalid_argument("score table has " + std::to_string(table.layers.size()) +
                                " layers, network has " + std::to_string(spec.blocks.size()));
  }
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    if (static_cast<Index>(table.layers[l].size()) != spec.blocks[l].out_channels) {
      throw std::invalid_argument("score table layer " + std::to_string(l) + " has " +
                                  std::to_string(table.layers[l].size()) + " filters, network has " +
                                  std::to_string(spec.blocks[l].out_channels));
    }
  }
}

template <typename Scalar>
PruneOutcome<Scalar> prune(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                           const ScoreTable& table, const PruneConfig& config) {
  config.validate();
  check_table_matches(spec, table);
  PruneReport report = select_filters(table, config.mu);
  return {apply_prune(params, report), std::move(report)};
}

}  // namespace bdnp
