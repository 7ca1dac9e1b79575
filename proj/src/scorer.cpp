#include "bdnp/scorer.hpp"

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

namespace bdnp {

namespace {

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_real(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("score CSV line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

std::string variant_name(ScoreVariant v) {
  switch (v) {
    case ScoreVariant::kFull: return "full";
    case ScoreVariant::kNoSqrt: return "no-sqrt";
    case ScoreVariant::kSpectral: return "spectral";
    case ScoreVariant::kSaliency: return "saliency";
    case ScoreVariant::kActivation: return "activation";
    case ScoreVariant::kCorrelation: return "correlation";
  }
  return "full";
}

ScoreVariant parse_variant(const std::string& name) {
  for (ScoreVariant v : all_variants()) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown score variant '" + name + "'");
}

const std::vector<ScoreVariant>& all_variants() {
  static const std::vector<ScoreVariant> v{ScoreVariant::kSpectral, ScoreVariant::kSaliency,
                                           ScoreVariant::kActivation, ScoreVariant::kCorrelation,
                                           ScoreVariant::kNoSqrt, ScoreVariant::kFull};
  return v;
}

double suspiciousness(double saliency, double correlation_normalized, double activation_norm,
                      double spectral_norm, bool use_sqrt, double eps) {
  const double ratio =
      saliency / (std::max(correlation_normalized, eps) * std::max(activation_norm, eps));
  return (use_sqrt ? std::sqrt(ratio) : ratio) * spectral_norm;
}

double variant_score(const FilterScore& f, ScoreVariant variant, double eps) {
  switch (variant) {
    case ScoreVariant::kFull:
      return suspiciousness(f.saliency, f.correlation_normalized, f.activation_norm,
                            f.spectral_norm, true, eps);
    case ScoreVariant::kNoSqrt:
      return suspiciousness(f.saliency, f.correlation_normalized, f.activation_norm,
                            f.spectral_norm, false, eps);
    case ScoreVariant::kSpectral: return f.spectral_norm;
    case ScoreVariant::kSaliency: return f.saliency;
    case ScoreVariant::kActivation: return 1.0 / std::max(f.activation_norm, eps);
    case ScoreVariant::kCorrelation: return 1.0 / std::max(f.correlation_normalized, eps);
  }
  return 0.0;
}

ScoreTable apply_variant(ScoreTable table, ScoreVariant variant) {
  table.variant = variant;
  for (auto& layer : table.layers) {
    for (auto& f : layer) f.suspiciousness = variant_score(f, variant, table.eps);
  }
  return table;
}

Index ScoreTable::filter_count() const {
  Index n = 0;
  for (const auto& l : layers) n += static_cast<Index>(l.size());
  return n;
}

std::vector<double> ScoreTable::layer_scores(std::size_t layer) const {
  std::vector<double> out;
  for (const auto& f : layers.at(layer)) out.push_back(f.suspiciousness);
  return out;
}

void ScoreTable::write_csv(std::ostream& os) const {
  os << "layer,filter,spectral,saliency,act_norm,corr_raw,corr_norm,suspiciousness,variant\n";
  const std::string v = variant_name(variant);
  for (const auto& layer : layers) {
    for (const auto& f : layer) {
      os << f.layer << ',' << f.filter << ',' << format_real(f.spectral_norm) << ','
         << format_real(f.saliency) << ',' << format_real(f.activation_norm) << ','
         << format_real(f.correlation_raw) << ',' << format_real(f.correlation_normalized) << ','
         << format_real(f.suspiciousness) << ',' << v << '\n';
    }
  }
}

ScoreTable ScoreTable::read_csv(std::istream& is, double eps) {
  ScoreTable t;
  t.eps = eps;
  std::string line;
  if (!std::getline(is, line) || line.rfind("layer,filter,", 0) != 0) {
    throw std::runtime_error("score CSV: missing header");
  }
  std::size_t lineno = 1;
  bool first = true;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 9) {
      throw std::runtime_error("score CSV line " + std::to_string(lineno) + ": expected 9 columns");
    }
    FilterScore f;
    f.layer = static_cast<Index>(parse_real(cells[0], lineno));
    f.filter = static_cast<Index>(parse_real(cells[1], lineno));
    f.spectral_norm = parse_real(cells[2], lineno);
    f.saliency = parse_real(cells[3], lineno);
    f.activation_norm = parse_real(cells[4], lineno);
    f.correlation_raw = parse_real(cells[5], lineno);
    f.correlation_normalized = parse_real(cells[6], lineno);
    f.suspiciousness = parse_real(cells[7], lineno);
    const ScoreVariant v = parse_variant(cells[8]);
    if (first) {
      t.variant = v;
      first = false;
    } else if (v != t.variant) {
      throw std::runtime_error("score CSV mixes variants");
    }
    if (f.layer < 0 || f.filter < 0) throw std::runtime_error("score CSV: negative index");
    const auto l = static_cast<std::size_t>(f.layer);
    if (l >= t.layers.size()) t.layers.resize(l + 1);
    if (f.filter != static_cast<Index>(t.layers[l].size())) {
      throw std::runtime_error("score CSV line " + std::to_string(lineno) + ": filters out of order");
    }
    t.layers[l].push_back(f);
  }
  return t;
}

Eigen::MatrixXd pearson_matrix(const Eigen::MatrixXd& norms) {
  const Index f = norms.rows();
  const Eigen::VectorXd mean = norms.rowwise().mean();
  const Eigen::MatrixXd centred = norms.colwise() - mean;
  const Eigen::VectorXd ss = centred.rowwise().squaredNorm();
  Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(f, f);
  for (Index i = 0; i < f; ++i) {
    for (Index j = i + 1; j < f; ++j) {
      double r = 0.0;
      if (ss[i] > 0.0 && ss[j] > 0.0) {
        r = centred.row(i).dot(centred.row(j)) / std::sqrt(ss[i] * ss[j]);
        r = std::clamp(r, -1.0, 1.0);
      }
      corr(i, j) = r;
      corr(j, i) = r;
    }
  }
  return corr;
}

CorrelationScores correlation_scores(const Eigen::MatrixXd& norms, double eps) {
  if (norms.cols() < 2) {
    throw std::invalid_argument("correlation_scores: needs at least two samples, got " +
                                std::to_string(norms.cols()));
  }
  const Index f = norms.rows();
  CorrelationScores out;
  if (f == 1) {
    out.raw = {0.0};
    out.normalized = {1.0};
    return out;
  }
  const Eigen::MatrixXd corr = pearson_matrix(norms);
  out.raw.resize(static_cast<std::size_t>(f));
  for (Index i = 0; i < f; ++i) {
    double sum = 0.0;
    for (Index j = 0; j < f; ++j) {
      if (j != i) sum += corr(i, j);
    }
    out.raw[static_cast<std::size_t>(i)] = sum / static_cast<double>(f - 1);
  }
  const auto [lo, hi] = std::minmax_element(out.raw.begin(), out.raw.end());
  const double min = *lo, range = *hi - *lo;
  out.normalized.resize(out.raw.size());
  for (std::size_t i = 0; i < out.raw.size(); ++i) {
    const double n = range > 0.0 ? (out.raw[i] - min) / range : 1.0;
    out.normalized[i] = std::max(n, eps);
  }
  return out;
}

std::string defense_set_id(const Dataset& defense) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (int y : defense.labels) mix(static_cast<std::uint8_t>(y));
  for (Index i = 0; i < defense.images.size(); ++i) {
    mix(static_cast<std::uint8_t>(std::lround(std::clamp(defense.images[i], 0.0, 1.0) * 255.0)));
  }
  std::ostringstream os;
  os << "n" << defense.size() << "-fnv" << std::hex << h;
  return os.str();
}

}  // namespace bdnp
