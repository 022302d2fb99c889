#pragma once
// Price-shift placebo for the identification checks. Within-week price
// changes are relocated to nearby change-free weeks; refitting a lean choice
// model on the shifted series should find nothing when prices are exogenous,
// and should keep finding a price effect when prices chase demand shocks
// that persist across neighboring weeks.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/evaluation.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/logit_baselines.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/session_grid.hpp"
#include "nestfact/splits_fwd.hpp"

namespace nestfact {

enum class ShiftMode { Forward, Backward };

struct PriceShift {
  std::vector<double> series;              // weekly levels with changes relocated
  std::vector<std::pair<int, int>> moves;  // original week -> relocated week
};

// Relocates every price change to the nearest originally change-free week in
// the given direction. A week holds a change when its level differs (in
// cents) from the prior week's level; `entering` is the level in force
// before the first week. Relocated weeks are claimed at most once and are
// always disjoint from the original change weeks; order among changes is
// preserved, so each relocated change keeps its original magnitude. Throws
// when a change runs out of free weeks in its direction.
inline PriceShift placebo_shift(std::span<const double> weekly, double entering, ShiftMode mode) {
  const int n = static_cast<int>(weekly.size());
  PriceShift out;
  out.series.assign(weekly.begin(), weekly.end());
  if (n == 0) return out;

  std::vector<std::uint8_t> change(static_cast<std::size_t>(n), 0);
  long long prev = eval_detail::cents(entering);
  for (int w = 0; w < n; ++w) {
    const long long cur = eval_detail::cents(weekly[static_cast<std::size_t>(w)]);
    change[static_cast<std::size_t>(w)] = cur != prev ? 1 : 0;
    prev = cur;
  }

  std::vector<std::uint8_t> claimed = change;  // change weeks are never targets
  const int step = mode == ShiftMode::Forward ? 1 : -1;
  auto relocate = [&](int w) {
    for (int t = w + step; t >= 0 && t < n; t += step) {
      if (claimed[static_cast<std::size_t>(t)]) continue;
      claimed[static_cast<std::size_t>(t)] = 1;
      out.moves.emplace_back(w, t);
      return;
    }
    throw DataError("placebo shift ran out of change-free weeks at week " + std::to_string(w));
  };
  if (mode == ShiftMode::Forward) {
    for (int w = 0; w < n; ++w)
      if (change[static_cast<std::size_t>(w)]) relocate(w);
  } else {
    for (int w = n - 1; w >= 0; --w)
      if (change[static_cast<std::size_t>(w)]) relocate(w);
    std::reverse(out.moves.begin(), out.moves.end());
  }

  // Claims never cross, so walking moves by relocated week visits original
  // changes in order; levels between relocated changes repeat the original
  // post-change levels.
  std::vector<std::pair<int, int>> by_target(out.moves.begin(), out.moves.end());
  std::sort(by_target.begin(), by_target.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  double level = entering;
  std::size_t k = 0;
  for (int w = 0; w < n; ++w) {
    if (k < by_target.size() && by_target[k].second == w)
      level = weekly[static_cast<std::size_t>(by_target[k++].first)];
    out.series[static_cast<std::size_t>(w)] = level;
  }
  return out;
}

// Weekly level of an item: the Wednesday price, which carries into the next
// week's Tuesday.
inline std::vector<double> weekly_price_levels(const SessionGrid& grid, int item) {
  std::vector<double> s(static_cast<std::size_t>(grid.n_weeks()));
  for (int w = 0; w < grid.n_weeks(); ++w)
    s[static_cast<std::size_t>(w)] = grid.price(item, grid.session(w, 1));
  return s;
}

// Writes a weekly level series back onto the grid. Tuesday takes the level
// in force entering the week, Wednesday the week's own level.
inline void apply_weekly_prices(SessionGrid& grid, int item, std::span<const double> weekly,
                                double entering) {
  if (static_cast<int>(weekly.size()) != grid.n_weeks())
    throw ConfigError("weekly price series does not match the grid");
  for (int w = 0; w < grid.n_weeks(); ++w) {
    grid.price(item, grid.session(w, 0)) =
        w > 0 ? weekly[static_cast<std::size_t>(w) - 1] : entering;
    grid.price(item, grid.session(w, 1)) = weekly[static_cast<std::size_t>(w)];
  }
}

// In-place shift of one item's prices; returns the relocation map.
inline PriceShift shift_item_prices(SessionGrid& grid, int item, ShiftMode mode) {
  const double entering = grid.price(item, 0);
  auto shift = placebo_shift(weekly_price_levels(grid, item), entering, mode);
  apply_weekly_prices(grid, item, shift.series, entering);
  return shift;
}

// ---- Placebo suite ------------------------------------------------------------

struct PlaceboOptions {
  double alpha = 0.01;
  SplitBucket bucket = SplitBucket::Train;
  int max_iter = 400;
};

struct PlaceboTest {
  int slot = -1;
  ShiftMode mode = ShiftMode::Forward;
  bool single_item = false;  // true: only the leading top item is shifted
  int focal_item = -1;       // set for the single-item scope
  bool fitted = false;
  bool identified = false;  // the tested coefficient has a finite p-value
  double coefficient = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  bool rejected = false;  // p-value below the suite's level
  std::string error;      // set when the refit threw
};

struct PlaceboReport {
  double alpha = 0.01;
  std::vector<PlaceboTest> tests;
  int n_identified = 0, n_rejected = 0, n_errors = 0, n_unidentified = 0;
  int slots_tested = 0, slots_rejecting = 0;  // categories with any rejection

  double rejection_rate() const {
    return n_identified > 0 ? static_cast<double>(n_rejected) / n_identified
                            : std::numeric_limits<double>::quiet_NaN();
  }
  double category_rejection_rate() const {
    return slots_tested > 0 ? static_cast<double>(slots_rejecting) / slots_tested
                            : std::numeric_limits<double>::quiet_NaN();
  }
};

// Runs the placebo battery: every kept category crossed with both shift
// directions and two scopes. The single-item scope relocates only the
// category's leading item and tests that item's own extra price coefficient;
// the all-items scope relocates every modeled item's series and tests the
// shared coefficient. The refit is a lean multinomial logit (no
// demographics, week offsets and a midweek dummy kept). Fit failures are
// recorded and the suite continues.
inline PlaceboReport run_placebo_suite(const TransactionPanel& panel,
                                       const ProductHierarchy& hierarchy,
                                       const CategoryCatalog& catalog, const SessionGrid& grid,
                                       const SampleSplit& split,
                                       const PlaceboOptions& opts = {}) {
  PlaceboReport report;
  report.alpha = opts.alpha;
  const auto items = modeled_items(catalog);
  for (int s = 0; s < catalog.n_kept(); ++s) {
    if (catalog.top_items[static_cast<std::size_t>(s)].empty()) continue;
    ++report.slots_tested;
    bool any_rejected = false;
    for (ShiftMode mode : {ShiftMode::Forward, ShiftMode::Backward}) {
      for (bool single : {true, false}) {
        PlaceboTest t;
        t.slot = s;
        t.mode = mode;
        t.single_item = single;
        if (single) t.focal_item = catalog.top_items[static_cast<std::size_t>(s)][0];
        try {
          SessionGrid shifted = grid;
          if (single) {
            shift_item_prices(shifted, t.focal_item, mode);
          } else {
            for (int j : items[static_cast<std::size_t>(s)]) shift_item_prices(shifted, j, mode);
          }
          CategoryChoiceData d =
              build_category_choice_data(panel, hierarchy, catalog, shifted, s, split);
          fill_choice_observations(d, panel, hierarchy, catalog, shifted, split, opts.bucket);
          LogitSpec spec;
          spec.kind = BaselineKind::Mnl;
          spec.demographics = false;
          spec.price = true;
          spec.week_offset = true;
          spec.weekday_dummy = true;
          spec.max_iter = opts.max_iter;
          if (single) spec.separate_price_alt = 0;
          const MleFit fit = fit_baseline(d, spec);
          t.fitted = true;
          t.coefficient = single ? fit.focal_price_coefficient() : fit.price_coefficient();
          t.se = single ? fit.focal_price_se() : fit.price_se();
          t.p_value = single ? fit.focal_price_p_value() : fit.price_p_value();
          t.identified = std::isfinite(t.p_value);
          t.rejected = t.identified && t.p_value < opts.alpha;
        } catch (const std::exception& e) {
          t.error = e.what();
        }
        if (!t.fitted)
          ++report.n_errors;
        else if (!t.identified)
          ++report.n_unidentified;
        else {
          ++report.n_identified;
          if (t.rejected) {
            ++report.n_rejected;
            any_rejected = true;
          }
        }
        report.tests.push_back(std::move(t));
      }
    }
    if (any_rejected) ++report.slots_rejecting;
  }
  return report;
}

}  // namespace nestfact
