#include "bdnp/pruner.hpp"

#include <algorithm>
#include <cmath>

namespace bdnp {

LayerMoments layer_moments(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("layer_threshold: empty layer");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  // A constant layer must give exactly std 0, whatever the rounding of the sum.
  if (*lo == *hi) return {*lo, 0.0};
  const double n = static_cast<double>(scores.size());
  double sum = 0.0;
  for (double s : scores) sum += s;
  const double mean = sum / n;
  double sq = 0.0;
  for (double s : scores) sq += (s - mean) * (s - mean);
  return {mean, std::sqrt(sq / n)};
}

double layer_threshold(std::span<const double> scores, double mu) {
  const LayerMoments m = layer_moments(scores);
  return m.mean + mu * m.stddev;
}

Index PruneReport::total_pruned() const {
  Index n = 0;
  for (const auto& l : layers) n += static_cast<Index>(l.pruned.size());
  return n;
}

nlohmann::json PruneReport::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"layer", l.layer},
                           {"mean", l.mean},
                           {"std", l.stddev},
                           {"threshold", l.threshold},
                           {"pruned", l.pruned}});
  }
  return {{"mu", mu}, {"layers", layers_json}, {"total_pruned", total_pruned()}};
}

PruneReport select_filters(const ScoreTable& table, double mu) {
  if (!(mu >= 0.0)) throw std::invalid_argument("prune: mu must be >= 0");
  PruneReport report;
  report.mu = mu;
  for (std::size_t l = 0; l < table.layers.size(); ++l) {
    const std::vector<double> scores = table.layer_scores(l);
    const LayerMoments m = layer_moments(scores);
    LayerPruneReport lr;
    lr.layer = static_cast<Index>(l);
    lr.mean = m.mean;
    lr.stddev = m.stddev;
    lr.threshold = m.mean + mu * m.stddev;
    for (std::size_t f = 0; f < scores.size(); ++f) {
      if (scores[f] > lr.threshold) lr.pruned.push_back(static_cast<Index>(f));
    }
    report.layers.push_back(std::move(lr));
  }
  return report;
}

}  // namespace bdnp
