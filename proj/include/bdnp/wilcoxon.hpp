#pragma once

#include <json.hpp>

#include <span>
#include <string>

namespace bdnp {

enum class Alternative { kGreater, kTwoSided };
enum class WilcoxonMethod { kExact, kNormal };

std::string alternative_name(Alternative a);
Alternative parse_alternative(const std::string& name);

struct WilcoxonResult {
  double statistic = 0.0;  // sum of ranks of positive differences
  long n_effective = 0;    // pairs left after dropping zero differences
  double p_value = 1.0;
  Alternative alternative = Alternative::kGreater;
  WilcoxonMethod method = WilcoxonMethod::kExact;
  bool degenerate = false;  // every difference was zero

  nlohmann::json to_json() const;
};

/// Exact null distributions are enumerated up to this many non-zero pairs.
inline constexpr long kWilcoxonExactLimit = 20;

/// Signed-rank test on d = a - b. Zero differences are dropped, tied |d| get
/// mid-ranks. The exact p-value is used for n_effective <= 20; beyond that a
/// normal approximation with tie and continuity corrections.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                    Alternative alternative = Alternative::kGreater);

}  // namespace bdnp
