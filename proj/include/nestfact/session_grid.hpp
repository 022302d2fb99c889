#pragma once

// Session grid: per (item, week, Tue/Wed) price and availability, plus the
// per-week category purchase rates used as pseudo week effects. Prices come
// from the modal transaction price that day (ties toward the lower price) and
// carry forward chronologically; availability is driven only by explicit
// out-of-stock listings via the 75%-of-trips rule.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nestfact/config.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/splits_fwd.hpp"

namespace nestfact {

struct DispersionRecord {
  int item;
  int week;
  int weekday_slot;  // 0=Tue, 1=Wed
  int n_distinct;
  double min_price;
  double max_price;
};

struct SessionGrid {
  std::vector<int> weeks;  // distinct week ids, ascending
  int n_items = 0;
  Matrix price;                         // n_items x n_sessions
  std::vector<std::uint8_t> available;  // n_items * n_sessions
  Matrix week_rate;                     // kept-category slot x n_weeks; filled later
  std::vector<DispersionRecord> dispersion;
  std::vector<std::string> warnings;

  int n_weeks() const { return static_cast<int>(weeks.size()); }
  int n_sessions() const { return 2 * n_weeks(); }
  int week_slot(int week) const {
    auto it = std::lower_bound(weeks.begin(), weeks.end(), week);
    return it != weeks.end() && *it == week ? static_cast<int>(it - weeks.begin()) : -1;
  }
  int session(int week_slot, int weekday_slot) const { return week_slot * 2 + weekday_slot; }
  bool is_available(int item, int sess) const {
    return available[static_cast<std::size_t>(item) * static_cast<std::size_t>(n_sessions()) + sess] != 0;
  }
  double price_at(int item, int sess) const { return price(item, sess); }
};

inline SessionGrid build_session_grid(const TransactionPanel& panel,
                                      const ProductHierarchy& hierarchy,
                                      const PanelConfig& config) {
  SessionGrid grid;
  grid.n_items = hierarchy.n_items();
  std::set<int> week_set;
  for (const Trip& t : panel.trips) week_set.insert(t.week);
  grid.weeks.assign(week_set.begin(), week_set.end());
  const int n_sessions = grid.n_sessions();
  grid.price = Matrix(grid.n_items, n_sessions, 0.0);
  grid.available.assign(static_cast<std::size_t>(grid.n_items) * n_sessions, 0);

  // Per-session trip totals and OOS listing counts, and per-session price
  // observations per item.
  std::vector<int> trips_per_session(static_cast<std::size_t>(n_sessions), 0);
  std::vector<std::map<int, int>> oos_counts(static_cast<std::size_t>(n_sessions));
  std::vector<std::map<int, std::map<long long, int>>> price_counts(
      static_cast<std::size_t>(n_sessions));
  for (const Trip& t : panel.trips) {
    if (t.weekday != kTuesday && t.weekday != kWednesday) continue;
    const int sess = grid.session(grid.week_slot(t.week), t.weekday == kWednesday);
    ++trips_per_session[static_cast<std::size_t>(sess)];
    for (int item : t.oos_items) ++oos_counts[static_cast<std::size_t>(sess)][item];
    for (const Purchase& p : t.purchases)
      ++price_counts[static_cast<std::size_t>(sess)][p.item][detail::price_cents(p.price)];
  }

  for (int j = 0; j < grid.n_items; ++j) {
    double carried = -1.0;
    for (int sess = 0; sess < n_sessions; ++sess) {
      const auto& counts = price_counts[static_cast<std::size_t>(sess)];
      auto it = counts.find(j);
      if (it != counts.end()) {
        int best_n = -1;
        long long best_c = 0;
        long long min_c = 0, max_c = 0;
        bool first = true;
        for (const auto& [cents, n] : it->second) {
          if (n > best_n || (n == best_n && cents < best_c)) {
            best_n = n;
            best_c = cents;
          }
          min_c = first ? cents : std::min(min_c, cents);
          max_c = first ? cents : std::max(max_c, cents);
          first = false;
        }
        carried = static_cast<double>(best_c) / 100.0;
        if (it->second.size() > 1)
          grid.dispersion.push_back({j, grid.weeks[static_cast<std::size_t>(sess / 2)], sess % 2,
                                     static_cast<int>(it->second.size()),
                                     static_cast<double>(min_c) / 100.0,
                                     static_cast<double>(max_c) / 100.0});
      }
      bool avail = carried > 0.0;
      if (!avail && sess == 0 && price_counts.size() > 0) {
        // no carry-forward source yet; stays unavailable
      }
      const int trips = trips_per_session[static_cast<std::size_t>(sess)];
      const auto& oos = oos_counts[static_cast<std::size_t>(sess)];
      auto oit = oos.find(j);
      if (oit != oos.end() && trips > 0 &&
          static_cast<double>(oit->second) > config.oos_trip_share * trips)
        avail = false;
      grid.price(j, sess) = carried > 0.0 ? carried : 0.0;
      grid.available[static_cast<std::size_t>(j) * n_sessions + sess] = avail ? 1 : 0;
    }
    if (carried < 0.0)
      grid.warnings.push_back("item " + hierarchy.upcs.name(j) +
                              " never observed with a price; marked unavailable");
  }
  return grid;
}

// Weeks (by id) in which any catalog top item's Tue and Wed prices differ.
inline std::vector<int> price_change_weeks(const SessionGrid& grid, const CategoryCatalog& catalog) {
  std::vector<int> out;
  for (int ws = 0; ws < grid.n_weeks(); ++ws) {
    bool change = false;
    for (int slot = 0; slot < catalog.n_kept() && !change; ++slot) {
      for (int j : catalog.top_items[static_cast<std::size_t>(slot)]) {
        const int s_tue = grid.session(ws, 0);
        const int s_wed = grid.session(ws, 1);
        if (!grid.is_available(j, s_tue) || !grid.is_available(j, s_wed)) continue;
        if (std::abs(grid.price(j, s_tue) - grid.price(j, s_wed)) > 0.005) {
          change = true;
          break;
        }
      }
    }
    if (change) out.push_back(grid.weeks[static_cast<std::size_t>(ws)]);
  }
  return out;
}

// Pseudo week effects: share of training trips in each week that purchased
// the category (any of its items). Weeks without training trips fall back to
// the category's overall training rate.
inline void compute_week_rates(SessionGrid& grid, const TransactionPanel& panel,
                               const ProductHierarchy& hierarchy, const CategoryCatalog& catalog,
                               const SampleSplit& split) {
  const int n_cats = catalog.n_kept();
  const int n_weeks = grid.n_weeks();
  grid.week_rate = Matrix(n_cats, n_weeks, 0.0);
  std::vector<int> trips_per_week(static_cast<std::size_t>(n_weeks), 0);
  Matrix buys(n_cats, n_weeks, 0.0);
  std::vector<long long> total_buys(static_cast<std::size_t>(n_cats), 0);
  long long total_trips = 0;
  for (const Trip& t : panel.trips) {
    if (split.of(t.household, t.week) != SplitBucket::Train) continue;
    const int ws = grid.week_slot(t.week);
    if (ws < 0) continue;
    ++trips_per_week[static_cast<std::size_t>(ws)];
    ++total_trips;
    std::set<int> bought;
    for (const Purchase& p : t.purchases) {
      const int slot = catalog.slot_of_category[static_cast<std::size_t>(hierarchy.category_of[p.item])];
      if (slot >= 0) bought.insert(slot);
    }
    for (int slot : bought) {
      buys(slot, ws) += 1.0;
      ++total_buys[static_cast<std::size_t>(slot)];
    }
  }
  for (int c = 0; c < n_cats; ++c) {
    const double overall =
        total_trips > 0 ? static_cast<double>(total_buys[static_cast<std::size_t>(c)]) /
                              static_cast<double>(total_trips)
                        : 0.0;
    for (int ws = 0; ws < n_weeks; ++ws) {
      const int n = trips_per_week[static_cast<std::size_t>(ws)];
      grid.week_rate(c, ws) = n > 0 ? buys(c, ws) / static_cast<double>(n) : overall;
    }
  }
}

inline void export_grid(const SessionGrid& grid, const ProductHierarchy& hierarchy,
                        const std::string& path, char sep = ',') {
  std::string out = "upc";
  for (const char* col : {"week", "weekday", "price", "available"}) {
    out += sep;
    out += col;
  }
  out += "\n";
  char buf[64];
  for (int j = 0; j < grid.n_items; ++j) {
    for (int ws = 0; ws < grid.n_weeks(); ++ws) {
      for (int wd = 0; wd < 2; ++wd) {
        const int sess = grid.session(ws, wd);
        std::snprintf(buf, sizeof(buf), "%.2f", grid.price(j, sess));
        out += hierarchy.upcs.name(j);
        out += sep;
        out += std::to_string(grid.weeks[static_cast<std::size_t>(ws)]);
        out += sep;
        out += wd == 0 ? "Tue" : "Wed";
        out += sep;
        out += buf;
        out += sep;
        out += grid.is_available(j, sess) ? "1" : "0";
        out += "\n";
      }
    }
  }
  write_file(path, out);
}

}  // namespace nestfact
