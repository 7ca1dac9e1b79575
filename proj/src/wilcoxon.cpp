#include "bdnp/wilcoxon.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace bdnp {

std::string alternative_name(Alternative a) {
  return a == Alternative::kGreater ? "greater" : "two-sided";
}

Alternative parse_alternative(const std::string& name) {
  if (name == "greater") return Alternative::kGreater;
  if (name == "two-sided") return Alternative::kTwoSided;
  throw std::invalid_argument("unknown alternative '" + name + "' (use greater or two-sided)");
}

nlohmann::json WilcoxonResult::to_json() const {
  return {{"statistic", statistic},
          {"n", n_effective},
          {"p_value", p_value},
          {"alternative", alternative_name(alternative)},
          {"method", method == WilcoxonMethod::kExact ? "exact" : "normal"},
          {"degenerate", degenerate}};
}

namespace {

// Twice the mid-ranks of |d|, so tied ranks stay integral.
std::vector<long> doubled_ranks(const std::vector<double>& abs_d) {
  const std::size_t n = abs_d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return abs_d[i] < abs_d[j]; });
  std::vector<long> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
    // positions i..j (0-based) share rank ((i+1)+(j+1))/2
    const long twice = static_cast<long>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = twice;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                    Alternative alternative) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: sequences differ in length");
  if (a.empty()) throw std::invalid_argument("wilcoxon: sequences are empty");

  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw std::invalid_argument("wilcoxon: non-finite difference");
    if (d != 0.0) diffs.push_back(d);
  }

  WilcoxonResult r;
  r.alternative = alternative;
  r.n_effective = static_cast<long>(diffs.size());
  if (diffs.empty()) {
    r.degenerate = true;
    r.p_value = 1.0;
    return r;
  }

  std::vector<double> abs_d(diffs.size());
  std::transform(diffs.begin(), diffs.end(), abs_d.begin(), [](double d) { return std::abs(d); });
  const std::vector<long> ranks2 = doubled_ranks(abs_d);
  long w2 = 0;
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (diffs[i] > 0) w2 += ranks2[i];
  }
  r.statistic = static_cast<double>(w2) / 2.0;
  const long n = r.n_effective;

  if (n <= kWilcoxonExactLimit) {
    r.method = WilcoxonMethod::kExact;
    // Null distribution of the doubled statistic: each rank is positive with
    // probability 1/2, independently.
    const long total2 = std::accumulate(ranks2.begin(), ranks2.end(), 0L);
    std::vector<double> counts(static_cast<std::size_t>(total2 + 1), 0.0);
    counts[0] = 1.0;
    long reach = 0;
    for (long rk : ranks2) {
      for (long s = reach; s >= 0; --s) {
        counts[static_cast<std::size_t>(s + rk)] += counts[static_cast<std::size_t>(s)];
      }
      reach += rk;
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    double upper = 0.0, lower = 0.0;
    for (long s = 0; s <= total2; ++s) {
      if (s >= w2) upper += counts[static_cast<std::size_t>(s)];
      if (s <= w2) lower += counts[static_cast<std::size_t>(s)];
    }
    upper /= all;
    lower /= all;
    r.p_value = alternative == Alternative::kGreater ? upper : std::min(1.0, 2.0 * std::min(upper, lower));
    return r;
  }

  r.method = WilcoxonMethod::kNormal;
  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1.0) / 4.0;
  double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0;
  std::vector<double> sorted = abs_d;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48.0;
    i = j;
  }
  const double sd = std::sqrt(var);
  if (alternative == Alternative::kGreater) {
    const double z = (r.statistic - mean - 0.5) / sd;
    r.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
  } else {
    const double z = std::max(0.0, std::abs(r.statistic - mean) - 0.5) / sd;
    r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  }
  return r;
}

}  // namespace bdnp
