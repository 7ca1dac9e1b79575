#pragma once

#include "bdnp/dataset.hpp"
#include "bdnp/network.hpp"
#include "bdnp/spectral.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace bdnp {

/// Which quantity a ScoreTable ranks filters by. The single-heuristic
/// variants are oriented so that larger means more suspicious: spectral norm
/// and saliency directly, activation norm and correlation as reciprocals.
enum class ScoreVariant { kFull, kNoSqrt, kSpectral, kSaliency, kActivation, kCorrelation };

inline constexpr double kDefaultScoreEps = 1e-2;

std::string variant_name(ScoreVariant v);
ScoreVariant parse_variant(const std::string& name);
const std::vector<ScoreVariant>& all_variants();

struct FilterScore {
  Index layer = 0;
  Index filter = 0;
  double spectral_norm = 0.0;
  double saliency = 0.0;
  double activation_norm = 0.0;
  double correlation_raw = 0.0;
  double correlation_normalized = 1.0;
  double suspiciousness = 0.0;
};

struct ScoreTable {
  std::vector<std::vector<FilterScore>> layers;
  ScoreVariant variant = ScoreVariant::kFull;
  std::string defense_set_id;
  double eps = kDefaultScoreEps;

  Index filter_count() const;
  std::vector<double> layer_scores(std::size_t layer) const;

  /// CSV columns: layer,filter,spectral,saliency,act_norm,corr_raw,corr_norm,suspiciousness,variant.
  /// Reals are written in shortest round-trip form.
  void write_csv(std::ostream& os) const;
  static ScoreTable read_csv(std::istream& is, double eps = kDefaultScoreEps);
};

/// sqrt(saliency / (corr * max(act, eps))) * spectral, or without the sqrt.
double suspiciousness(double saliency, double correlation_normalized, double activation_norm,
                      double spectral_norm, bool use_sqrt, double eps);

/// Score of one filter under `variant` from its stored components.
double variant_score(const FilterScore& f, ScoreVariant variant, double eps);

/// Recomputes every suspiciousness entry from the stored components.
ScoreTable apply_variant(ScoreTable table, ScoreVariant variant);

/// Pearson correlation matrix of the rows of `norms` (filters x samples).
/// Rows with zero variance correlate 0 with every other row; the diagonal is 1.
Eigen::MatrixXd pearson_matrix(const Eigen::MatrixXd& norms);

struct CorrelationScores {
  std::vector<double> raw;         // mean over j != i of corr(i, j)
  std::vector<double> normalized;  // per-layer min-max to [0,1], clamped below at eps
};

/// Per-filter correlation for one layer from its per-sample activation norms.
CorrelationScores correlation_scores(const Eigen::MatrixXd& norms, double eps);

/// FNV-1a digest of a defense set's labels and 8-bit pixels.
std::string defense_set_id(const Dataset& defense);

/// Per-layer [filters x samples] matrices of channel-map l2 norms.
template <typename Scalar>
std::vector<Eigen::MatrixXd> per_sample_norms(const ActivationTrace<Scalar>& trace) {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& t : trace.layers) {
    const Index n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
    Eigen::MatrixXd norms(c, n);
    for (Index s = 0; s < n; ++s) {
      for (Index ch = 0; ch < c; ++ch) {
        const auto map = t.data().segment((s * c + ch) * plane, plane).template cast<double>();
        norms(ch, s) = map.norm();
      }
    }
    out.push_back(std::move(norms));
  }
  return out;
}

/// Mean over samples of each filter's channel-map l2 norm, per layer.
template <typename Scalar>
std::vector<std::vector<double>> activation_norm(const ActivationTrace<Scalar>& trace) {
  std::vector<std::vector<double>> out;
  for (const auto& norms : per_sample_norms(trace)) {
    if (norms.cols() == 0) throw std::invalid_argument("activation_norm: empty trace");
    std::vector<double> layer(static_cast<std::size_t>(norms.rows()));
    for (Index f = 0; f < norms.rows(); ++f) {
      layer[static_cast<std::size_t>(f)] = norms.row(f).sum() / static_cast<double>(norms.cols());
    }
    out.push_back(std::move(layer));
  }
  return out;
}

/// Spectral norm of one fused filter [Cin,Kh,Kw], viewed as Cin x (Kh*Kw).
template <typename Scalar>
double spectral_norm(const Tensor<Scalar>& fused_filter) {
  fused_filter.require_rank(3, "spectral_norm filter");
  const Index cin = fused_filter.dim(0);
  return spectral_norm(fused_filter.matrix(cin, fused_filter.dim(1) * fused_filter.dim(2)));
}

/// Spectral norms of every filter of every layer after conv/BN fusion.
template <typename Scalar>
std::vector<std::vector<double>> spectral_norms(const NetworkSpec& spec,
                                                const NetworkParams<Scalar>& params) {
  std::vector<std::vector<double>> out;
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    const auto& bp = params.blocks[l];
    const auto fused = fuse_conv_bn(bp.weight, bp.gamma, bp.running_var,
                                    static_cast<Scalar>(spec.blocks[l].eps));
    const Index cout = fused.dim(0), cin = fused.dim(1), kk = fused.dim(2) * fused.dim(3);
    std::vector<double> layer;
    for (Index c = 0; c < cout; ++c) {
      Eigen::Map<const typename Tensor<Scalar>::RowMajorMatrix> m(fused.raw() + c * cin * kk, cin, kk);
      layer.push_back(spectral_norm(m));
    }
    out.push_back(std::move(layer));
  }
  return out;
}

/// Sum over defense samples of each filter's mean absolute loss gradient with
/// respect to its raw conv weights. One backward pass per sample, batch-norm
/// in infer mode.
template <typename Scalar>
std::vector<std::vector<double>> saliency(const NetworkSpec& spec,
                                          const NetworkParams<Scalar>& params,
                                          const Dataset& defense) {
  if (defense.size() < 1) throw std::invalid_argument("saliency: defense set is empty");
  std::vector<std::vector<double>> out(spec.blocks.size());
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    out[l].assign(static_cast<std::size_t>(spec.blocks[l].out_channels), 0.0);
  }
  for (Index s = 0; s < defense.size(); ++s) {
    const Index idx[1] = {s};
    Tape<Scalar> tape;
    const GraphVars vars = record_forward(tape, spec, params, defense.batch<Scalar>(idx), Mode::kInfer);
    const Var loss = tape.softmax_cross_entropy(vars.logits, defense.batch_labels(idx));
    tape.backward(loss);
    for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
      const auto& g = tape.grad(vars.blocks[l].weight);
      const Index cout = g.dim(0);
      const Index per = g.size() / cout;
      const auto gm = g.matrix(cout, per);
      for (Index c = 0; c < cout; ++c) {
        out[l][static_cast<std::size_t>(c)] +=
            gm.row(c).template cast<double>().cwiseAbs().sum() / static_cast<double>(per);
      }
    }
  }
  return out;
}

/// All four heuristics for every scored filter, scored with `variant`.
template <typename Scalar>
ScoreTable score_network(const NetworkSpec& spec, const NetworkParams<Scalar>& params,
                         const Dataset& defense, ScoreVariant variant = ScoreVariant::kFull,
                         double eps = kDefaultScoreEps) {
  if (defense.size() < 2) {
    throw std::invalid_argument("score_network: filter correlation needs at least two defense samples");
  }
  const auto spectral = spectral_norms(spec, params);
  const auto sal = saliency(spec, params, defense);
  const auto fwd = forward(spec, params, defense.all_images<Scalar>(), true);
  const auto norms = per_sample_norms(*fwd.trace);
  const auto act = activation_norm(*fwd.trace);

  ScoreTable table;
  table.variant = variant;
  table.eps = eps;
  table.defense_set_id = defense_set_id(defense);
  for (std::size_t l = 0; l < spec.blocks.size(); ++l) {
    const CorrelationScores corr = correlation_scores(norms[l], eps);
    std::vector<FilterScore> layer;
    for (std::size_t f = 0; f < spectral[l].size(); ++f) {
      FilterScore s;
      s.layer = static_cast<Index>(l);
      s.filter = static_cast<Index>(f);
      s.spectral_norm = spectral[l][f];
      s.saliency = sal[l][f];
      s.activation_norm = act[l][f];
      s.correlation_raw = corr.raw[f];
      s.correlation_normalized = corr.normalized[f];
      s.suspiciousness = variant_score(s, variant, eps);
      layer.push_back(s);
    }
    table.layers.push_back(std::move(layer));
  }
  return table;
}

}  // namespace bdnp
