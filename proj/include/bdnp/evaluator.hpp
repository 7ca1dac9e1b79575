#pragma once

#include "bdnp/dataset.hpp"
#include "bdnp/pruner.hpp"
#include "bdnp/scorer.hpp"
#include "bdnp/wilcoxon.hpp"

#include <numeric>

namespace bdnp {

struct EvalResult {
  double acc = 0.0;  // percent of clean records classified correctly
  double asr = 0.0;  // percent of triggered non-target records sent to the target
  Index acc_correct = 0;
  Index acc_total = 0;
  Index asr_hits = 0;
  Index asr_total = 0;

  nlohmann::json to_json() const {
    return {{"acc", acc},
            {"asr", asr},
            {"acc_correct", acc_correct},
            {"acc_total", acc_total},
            {"asr_hits", asr_hits},
            {"asr_total", asr_total}};
  }
};

inline constexpr Index kEvalBatch = 256;

/// Infer-mode argmax predictions, evaluated in fixed-size chunks.
template <typename Scalar>
std::vector<int> predict(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                         const Dataset& data) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  for (Index start = 0; start < data.size(); start += kEvalBatch) {
    const Index len = std::min(kEvalBatch, data.size() - start);
    std::vector<Index> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = infer_logits(spec, params, data.batch<Scalar>(idx));
    for (Index r = 0; r < len; ++r) {
      Index best = 0;
      for (Index k = 1; k < logits.dim(1); ++k) {
        if (logits(r, k) > logits(r, best)) best = k;
      }
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

template <typename Scalar>
EvalResult accuracy_counts(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                           const Dataset& clean) {
  if (clean.size() == 0) throw std::invalid_argument("accuracy: empty test set");
  const auto pred = predict(spec, params, clean);
  EvalResult r;
  r.acc_total = clean.size();
  for (std::size_t i = 0; i < pred.size(); ++i) r.acc_correct += pred[i] == clean.labels[i];
  r.acc = 100.0 * static_cast<double>(r.acc_correct) / static_cast<double>(r.acc_total);
  return r;
}

template <typename Scalar>
double accuracy(const NetworkSpec& spec, const NetworkParams<Scalar>& params, const Dataset& clean) {
  return accuracy_counts(spec, params, clean).acc;
}

template <typename Scalar>
EvalResult attack_counts(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                         const Dataset& asr_set, int target_label) {
  if (asr_set.size() == 0) throw std::invalid_argument("attack_success_rate: empty eval set");
  for (int y : asr_set.labels) {
    if (y == target_label) {
      throw std::invalid_argument("attack_success_rate: eval set contains target-class records");
    }
  }
  const auto pred = predict(spec, params, asr_set);
  EvalResult r;
  r.asr_total = asr_set.size();
  for (int p : pred) r.asr_hits += p == target_label;
  r.asr = 100.0 * static_cast<double>(r.asr_hits) / static_cast<double>(r.asr_total);
  return r;
}

template <typename Scalar>
double attack_success_rate(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                           const Dataset& asr_set, int target_label) {
  return attack_counts(spec, params, asr_set, target_label).asr;
}

/// The clean test set, the triggered non-target test set and the target label.
struct EvalSets {
  const Dataset& clean;
  const Dataset& triggered;
  int target_label = 0;
};

template <typename Scalar>
EvalResult evaluate(const NetworkSpec& spec, const NetworkParams<Scalar>& params, const EvalSets& sets) {
  EvalResult r = accuracy_counts(spec, params, sets.clean);
  const EvalResult a = attack_counts(spec, params, sets.triggered, sets.target_label);
  r.asr = a.asr;
  r.asr_hits = a.asr_hits;
  r.asr_total = a.asr_total;
  return r;
}

struct SweepRow {
  double mu = 0.0;
  double acc = 0.0;
  double asr = 0.0;
  Index pruned_count = 0;
};

/// 0.0, 0.5, ..., 10.0.
inline std::vector<double> default_mu_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(0.5 * i);
  return g;
}

/// One independent prune-and-evaluate of the original params per grid value.
template <typename Scalar>
std::vector<SweepRow> sweep_mu(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                               const ScoreTable& table, const std::vector<double>& grid,
                               const EvalSets& sets) {
  if (grid.empty()) throw std::invalid_argument("sweep_mu: empty grid");
  if (!std::is_sorted(grid.begin(), grid.end())) throw std::invalid_argument("sweep_mu: grid must be sorted");
  std::vector<SweepRow> rows;
  for (double mu : grid) {
    const auto outcome = prune(spec, params, table, PruneConfig{mu});
    const EvalResult e = evaluate(spec, outcome.params, sets);
    rows.push_back({mu, e.acc, e.asr, outcome.report.total_pruned()});
  }
  return rows;
}

struct AblationRow {
  ScoreVariant variant = ScoreVariant::kFull;
  EvalResult eval;
  Index pruned_count = 0;
};

/// Scores, prunes and evaluates every variant from the same backdoored model.
/// The four heuristics are computed once and re-combined per variant.
template <typename Scalar>
std::vector<AblationRow> ablate(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                                const Dataset& defense, const EvalSets& sets, double mu,
                                double eps = kDefaultScoreEps) {
  const ScoreTable components = score_network(spec, params, defense, ScoreVariant::kFull, eps);
  std::vector<AblationRow> rows;
  for (ScoreVariant v : all_variants()) {
    const auto outcome = prune(spec, params, apply_variant(components, v), PruneConfig{mu});
    rows.push_back({v, evaluate(spec, outcome.params, sets), outcome.report.total_pruned()});
  }
  return rows;
}

}  // namespace bdnp
