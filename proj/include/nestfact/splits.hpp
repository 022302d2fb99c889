#pragma once

// Train/validation/test split over (household, week) cells. Test cells are
// drawn uniformly; validation cells over-weight weeks with price changes so
// hyper-parameter tuning sees the variation that identifies price terms.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/splits_fwd.hpp"

namespace nestfact {

struct SplitScheme {
  double validation_fraction = 0.10;
  double test_fraction = 0.10;
  double price_change_boost = 3.0;  // validation odds multiplier for change weeks
  std::vector<int> change_weeks;    // week ids with any top-item price change
  std::string tag = "household-week";
};

inline SampleSplit split_holdout(const TransactionPanel& panel, const SplitScheme& scheme,
                                 std::uint64_t seed) {
  if (scheme.validation_fraction < 0.0 || scheme.test_fraction < 0.0 ||
      scheme.validation_fraction + scheme.test_fraction >= 1.0)
    throw ConfigError("validation+test fractions must sum to less than 1");

  std::set<std::pair<int, int>> cell_set;
  std::set<int> change(scheme.change_weeks.begin(), scheme.change_weeks.end());
  long long n_change = 0;
  for (const Trip& t : panel.trips) cell_set.insert({t.household, t.week});
  for (const auto& [hh, week] : cell_set) n_change += change.count(week) > 0;

  // Unconditional validation probabilities: boosted for change weeks, scaled
  // so the expected validation share stays at the configured fraction.
  const double n_cells = static_cast<double>(cell_set.size());
  const double share_change = n_cells > 0 ? static_cast<double>(n_change) / n_cells : 0.0;
  const double boost = std::max(1.0, scheme.price_change_boost);
  double p_lo = scheme.validation_fraction / (share_change * boost + (1.0 - share_change));
  double p_hi = boost * p_lo;
  const double max_p = 1.0 - scheme.test_fraction;
  if (p_hi > max_p) {
    p_hi = max_p;
    p_lo = share_change < 1.0
               ? std::max(0.0, (scheme.validation_fraction - share_change * p_hi) / (1.0 - share_change))
               : p_hi;
  }

  SampleSplit split;
  split.scheme_tag = scheme.tag;
  for (const auto& [hh, week] : cell_set) {
    auto rng = make_rng(seed, rng_stream::kSplit,
                        mix64(static_cast<std::uint64_t>(hh), static_cast<std::uint64_t>(
                                                                  static_cast<std::uint32_t>(week))));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(rng);
    SplitBucket b = SplitBucket::Train;
    if (u < scheme.test_fraction) {
      b = SplitBucket::Test;
    } else {
      const double p_val = change.count(week) ? p_hi : p_lo;
      const double v = unif(rng);
      if (v * (1.0 - scheme.test_fraction) < p_val) b = SplitBucket::Validation;
    }
    split.cells[SampleSplit::key(hh, week)] = b;
  }
  return split;
}

}  // namespace nestfact
